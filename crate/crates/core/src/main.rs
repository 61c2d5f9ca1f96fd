use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rmdecomp::decomp::GenerationConstraints;
use rmdecomp::harness::{
    self, format_trace, sweep_table, Experiment, ExperimentConfig, HarnessError,
};
use rmdecomp::rm::parse_rm;
use rmdecomp::training::TaskConditionedPolicy;

#[derive(Parser)]
#[command(name = "rmdecomp", version, about = "Reward-machine decomposition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write logs.
    Train(ConfigArgs),
    /// One run per candidate-set size.
    SweepK {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10, 25])]
        ks: Vec<usize>,
    },
    /// List the top-k decompositions with validity verdicts.
    Validate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Greedy rollouts of a saved policy.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        frozen: FrozenArgs,
        #[arg(long, default_value_t = 100)]
        rollouts: usize,
    },
    /// Print the event and machine-state trace of one greedy episode.
    Replay {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        frozen: FrozenArgs,
    },
}

#[derive(Args)]
struct FrozenArgs {
    /// Policy table written by `train`.
    #[arg(long)]
    policy: PathBuf,
    /// Candidate index the policy acts under.
    #[arg(long, default_value_t = 0)]
    decomposition: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    map: Option<String>,
    #[arg(long)]
    rm: Option<String>,
    #[arg(long)]
    constraints: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    slip_prob: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    overall_bonus: Option<String>,
    #[arg(long)]
    condition_on_overall: Option<String>,
    #[arg(long)]
    episodes: Option<String>,
    /// `0,1,2` or `0..5`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    output: Option<String>,
    /// Any other config key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => {
                let mut c = ExperimentConfig::default();
                c.apply_env(std::env::vars())?;
                c
            }
        };
        let flags = [
            ("env", &self.env),
            ("map", &self.map),
            ("rm", &self.rm),
            ("constraints", &self.constraints),
            ("mode", &self.mode),
            ("k", &self.k),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("slip_prob", &self.slip_prob),
            ("max_steps", &self.max_steps),
            ("overall_bonus", &self.overall_bonus),
            ("condition_on_overall", &self.condition_on_overall),
            ("episodes", &self.episodes),
            ("seeds", &self.seeds),
            ("output", &self.output),
        ];
        let mut errors = Vec::new();
        let cwd = Path::new(".");
        for (key, value) in flags {
            if let Some(v) = value {
                if let Err(e) = cfg.set(key, v, cwd) {
                    errors.push(e);
                }
            }
        }
        for kv in &self.set {
            match kv.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v, cwd) {
                        errors.push(e);
                    }
                }
                None => errors.push(format!("--set expects KEY=VALUE, got `{kv}`")),
            }
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(HarnessError::Config(errors))
        }
    }
}

fn load_policy(path: &Path, exp: &Experiment) -> Result<TaskConditionedPolicy, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(TaskConditionedPolicy::load(
        &text,
        0.0,
        exp.config.learning_rate,
        exp.game.spec().gamma,
    )?)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let summary = harness::run(&cfg)?;
            print!("{}", summary.report());
            if let Some(dir) = &cfg.output {
                println!("wrote {}", dir.display());
            }
        }
        Command::SweepK { cfg, ks } => {
            let cfg = cfg.load()?;
            let entries = harness::sweep_k(&cfg, &ks)?;
            print!("{}", sweep_table(&entries));
        }
        Command::Validate { cfg } => {
            let cfg = cfg.load()?;
            let (task, constraints) = if cfg.rm.is_some() || cfg.constraints.is_some() {
                // files given directly; the map is not needed
                let exp_default = Experiment::prepare(&ExperimentConfig {
                    rm: None,
                    constraints: None,
                    map: None,
                    ..cfg.clone()
                })?;
                let task = match &cfg.rm {
                    Some(p) => parse_rm(&read(p)?)?,
                    None => exp_default.task,
                };
                let constraints = match &cfg.constraints {
                    Some(p) => GenerationConstraints::parse(&read(p)?, None)?,
                    None => exp_default.constraints,
                };
                (task, constraints)
            } else {
                let exp = Experiment::prepare(&cfg)?;
                (exp.task, exp.constraints)
            };
            let report = harness::validate_decompositions(&task, &constraints, cfg.k)?;
            print!("{report}");
        }
        Command::Eval { cfg, frozen, rollouts } => {
            let cfg = cfg.load()?;
            let exp = Experiment::prepare(&cfg)?;
            let policy = load_policy(&frozen.policy, &exp)?;
            let s = harness::eval(&exp, &policy, frozen.decomposition, rollouts, frozen.seed)?;
            println!(
                "episodes {} completion {:.3} mean discounted reward {:.4} sub-task rewards {:?}",
                s.episodes, s.completion_rate, s.mean_discounted_reward, s.mean_sub_rewards
            );
        }
        Command::Replay { cfg, frozen } => {
            let cfg = cfg.load()?;
            let exp = Experiment::prepare(&cfg)?;
            let policy = load_policy(&frozen.policy, &exp)?;
            let (trace, completed) = harness::replay(&exp, &policy, frozen.decomposition, frozen.seed)?;
            print!("{}", format_trace(&trace));
            println!("completed: {completed}");
        }
    }
    Ok(())
}

fn read(p: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(p).map_err(|source| HarnessError::Io {
        path: p.to_path_buf(),
        source,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
