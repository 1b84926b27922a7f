use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use protolab::harness::{self, load_mdp, load_pretrained, offline_stage_from, save_json, OfflineStage, RunConfig};
use protolab::pretrain::{collect_with_descriptor, pretrain, BehaviorSpec, PretrainMethod, TransitionDataset};
use protolab::{make_env, EnvSpec, LabError};

#[derive(Parser)]
#[command(name = "proto-lab", version, about = "Tabular offline-to-online RL with iterative policy regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a finite MDP from a compact spec and write it as JSON.
    GenEnv {
        /// e.g. `gridworld:3x3`, `cliff_chain:6`, `random:seed=1,states=5,actions=3`
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a behavior policy and write a transition dataset.
    Collect {
        #[arg(long)]
        env: PathBuf,
        /// `uniform`, `optimal:EPS`, `serpentine:WxH:EPS`, or a JSON object
        #[arg(long, default_value = "uniform")]
        behavior: String,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a policy and Q-table from a dataset.
    Pretrain {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: PretrainMethod,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the online finetuning batch described by a config.
    Finetune(ConfigArgs),
    /// Run noise-injected exact iteration for every seed of a config.
    IterateExact(ConfigArgs),
    /// Audit the error bound of a config's algorithm.
    AuditBounds(ConfigArgs),
    /// Run several configs and write merged aggregates plus plot scripts.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write gnuplot scripts for a report directory.
    Plot {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset written by `collect`, replacing the config's `dataset` section.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Tables written by `pretrain`; needs `--data`.
    #[arg(long, requires = "data")]
    pretrained: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> protolab::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }

    fn stage(&self, cfg: &RunConfig) -> protolab::Result<Option<OfflineStage>> {
        let Some(data) = &self.data else { return Ok(None) };
        let data = TransitionDataset::load(data)?;
        let pre = self.pretrained.as_deref().map(load_pretrained).transpose()?;
        offline_stage_from(cfg, data, pre).map(Some)
    }
}

fn parse_method(s: &str) -> Result<PretrainMethod, String> {
    match s {
        "bc_fqe" => Ok(PretrainMethod::BcFqe),
        "insample_fqi" => Ok(PretrainMethod::InsampleFqi),
        _ => Err(format!("expected bc_fqe or insample_fqi, got `{s}`")),
    }
}

fn gen_env(spec: &str, out: &Path) -> protolab::Result<()> {
    let spec = EnvSpec::parse(spec)?;
    let mdp = make_env(&spec)?;
    save_json(&mdp, out)?;
    info!("wrote {} ({} states, {} actions)", out.display(), mdp.n_states(), mdp.n_actions());
    Ok(())
}

fn collect(env: &Path, behavior: &str, n: usize, seed: u64, out: &Path) -> protolab::Result<()> {
    let mdp = load_mdp(env)?;
    let spec = BehaviorSpec::parse(behavior)?;
    let pi = spec.build(&mdp)?;
    let data = collect_with_descriptor(&mdp, &pi, n, seed, &spec.descriptor())?;
    data.save(out)?;
    info!("wrote {} transitions to {}", data.transitions.len(), out.display());
    Ok(())
}

fn run_pretrain(env: &Path, data: &Path, method: PretrainMethod, out: &Path) -> protolab::Result<()> {
    let mdp = load_mdp(env)?;
    let data = TransitionDataset::load(data)?;
    let pre = pretrain(method, &data, &mdp)?;
    save_json(&pre, out)?;
    // Round-trip check keeps the written file loadable by later stages.
    load_pretrained(out)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> protolab::Result<()> {
    match cli.command {
        Command::GenEnv { spec, out } => gen_env(&spec, &out),
        Command::Collect { env, behavior, n, seed, out } => collect(&env, &behavior, n, seed, &out),
        Command::Pretrain { env, data, method, out } => run_pretrain(&env, &data, method, &out),
        Command::Finetune(args) => {
            let cfg = args.load()?;
            let report = match args.stage(&cfg)? {
                Some(stage) => harness::run_batch_with(&cfg, &stage)?,
                None => harness::run_batch(&cfg)?,
            };
            for run in &report.runs {
                for s in &run.seeds {
                    info!("{} seed {}: final return {}, drop {}", run.label, s.seed, s.final_return, s.drop.drop_fraction);
                }
            }
            Ok(())
        }
        Command::IterateExact(args) => {
            let cfg = args.load()?;
            let stage = args.stage(&cfg)?;
            for (seed, trace) in harness::iterate_exact(&cfg, stage.as_ref())? {
                info!("seed {seed}: final gap {}", trace.final_gap());
            }
            Ok(())
        }
        Command::AuditBounds(args) => {
            let cfg = args.load()?;
            let stage = args.stage(&cfg)?;
            let summary = harness::audit_bounds(&cfg, stage.as_ref())?;
            info!(
                "{} seeds: {} violations, {} precondition failures",
                summary.n_seeds, summary.violations, summary.precondition_failures
            );
            Ok(())
        }
        Command::Compare { configs, out } => {
            let cfgs = configs.iter().map(|p| RunConfig::load(p)).collect::<protolab::Result<Vec<_>>>()?;
            harness::compare(&cfgs, &out)?;
            info!("wrote report to {}", out.display());
            Ok(())
        }
        Command::Plot { dir } => {
            for f in harness::emit_plots(&dir)? {
                info!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            // Help and version go to stdout as usual; everything else to stderr.
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &LabError) -> u8 {
    if e.is_config() {
        1
    } else {
        2
    }
}
