//! Experiment configuration, multi-seed runs, k-sweeps, candidate
//! validation, frozen-policy evaluation and episode replay.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use thiserror::Error;

use crate::builtin;
use crate::decomp::{
    enumerate_candidates, is_valid, trace_counterexample, write_decompositions, DecompError,
    Decomposition, GenerationConstraints,
};
use crate::envs::{EnvError, EnvKind, GridGame, GridSpec, SimRng};
use crate::rm::{parse_rm, RewardMachine, RmError};
use crate::training::{
    build_candidates, run_episode, train, vocabulary_map, ActiveDecomposition, EpisodeOptions,
    Mode, RewardShaping, TaskConditionedPolicy, TraceStep, TrainError, TrainParams, TrainingLog,
};

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "RMDECOMP_";

/// Alphabet size up to which validation also runs the exhaustive trace check.
pub const BRUTE_FORCE_MAX_EVENTS: usize = 6;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration errors:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("reward machine: {0}")]
    Rm(#[from] RmError),
    #[error("map: {0}")]
    Env(#[from] EnvError),
    #[error(transparent)]
    Decomp(#[from] DecompError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 when no valid
    /// decomposition exists, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Decomp(DecompError::NoValidDecomposition)
            | HarnessError::Train(TrainError::Decomp(DecompError::NoValidDecomposition)) => 3,
            HarnessError::Config(_)
            | HarnessError::Rm(_)
            | HarnessError::Env(_)
            | HarnessError::Decomp(_)
            | HarnessError::Train(TrainError::BadParameters(_))
            | HarnessError::Train(TrainError::Decomp(_))
            | HarnessError::Train(TrainError::Selection(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectorReward {
    Discounted,
    Indicator,
}

impl SelectorReward {
    pub fn name(self) -> &'static str {
        match self {
            SelectorReward::Discounted => "discounted",
            SelectorReward::Indicator => "indicator",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    /// Files; `None` selects the shipped file for `env`.
    pub map: Option<PathBuf>,
    pub rm: Option<PathBuf>,
    pub constraints: Option<PathBuf>,
    pub mode: Mode,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    /// `None` keeps the map's value.
    pub gamma: Option<f64>,
    pub slip_prob: Option<f64>,
    pub max_steps: Option<usize>,
    pub overall_bonus: f64,
    pub bonus_to_sink: bool,
    pub condition_on_overall: bool,
    pub epsilon: f64,
    pub learning_rate: f64,
    /// `discounted` (gamma^t) or `indicator` (0/1) sub-task values.
    pub selector_reward: SelectorReward,
    /// Random processing order for simultaneous events.
    pub shuffle_events: bool,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
    /// Window of the rolling completion rate.
    pub window: usize,
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainParams::default();
        Self {
            env: EnvKind::FourButtons,
            map: None,
            rm: None,
            constraints: None,
            mode: t.mode,
            k: t.k,
            alpha: t.alpha,
            beta: t.beta,
            gamma: None,
            slip_prob: None,
            max_steps: None,
            overall_bonus: t.shaping.overall_bonus,
            bonus_to_sink: t.shaping.bonus_to_sink,
            condition_on_overall: t.condition_on_overall,
            epsilon: t.epsilon,
            learning_rate: t.learning_rate,
            selector_reward: SelectorReward::Discounted,
            shuffle_events: false,
            episodes: t.episodes,
            seeds: vec![0, 1, 2, 3, 4],
            output: None,
            window: 100,
            timing: false,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "env",
    "map",
    "rm",
    "constraints",
    "mode",
    "k",
    "alpha",
    "beta",
    "gamma",
    "slip_prob",
    "max_steps",
    "overall_bonus",
    "bonus_to_sink",
    "condition_on_overall",
    "epsilon",
    "learning_rate",
    "selector_reward",
    "shuffle_events",
    "episodes",
    "seeds",
    "output",
    "window",
    "timing",
];

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Some(true),
        "false" | "no" | "0" | "off" => Some(false),
        _ => None,
    }
}

/// `1,2,3`, `1 2 3` or a half-open range `0..5`.
pub fn parse_seeds(v: &str) -> Option<Vec<u64>> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b) = (a.trim().parse::<u64>().ok()?, b.trim().parse::<u64>().ok()?);
        return Some((a..b).collect());
    }
    v.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().ok())
        .collect()
}

impl ExperimentConfig {
    /// Applies one key. Relative paths are resolved against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), String> {
        let v = value.trim();
        let bad = |what: &str| format!("{key}: expected {what}, got `{v}`");
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad("a number"));
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let flag = |v: &str| parse_bool(v).ok_or_else(|| bad("true or false"));
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        let opt = |v: &str| v.is_empty() || v == "default";
        match key {
            "env" => self.env = EnvKind::from_name(v).ok_or_else(|| bad("an environment name"))?,
            "map" => self.map = (!opt(v)).then(|| path(v)),
            "rm" => self.rm = (!opt(v)).then(|| path(v)),
            "constraints" => self.constraints = (!opt(v)).then(|| path(v)),
            "mode" => {
                self.mode = Mode::from_name(v).ok_or_else(|| bad("lotad, atad_fixed or monolithic"))?
            }
            "k" => self.k = int(v)?,
            "alpha" => self.alpha = num(v)?,
            "beta" => self.beta = num(v)?,
            "gamma" => self.gamma = if opt(v) { None } else { Some(num(v)?) },
            "slip_prob" => self.slip_prob = if opt(v) { None } else { Some(num(v)?) },
            "max_steps" => self.max_steps = if opt(v) { None } else { Some(int(v)?) },
            "overall_bonus" => self.overall_bonus = num(v)?,
            "bonus_to_sink" => self.bonus_to_sink = flag(v)?,
            "condition_on_overall" => self.condition_on_overall = flag(v)?,
            "epsilon" => self.epsilon = num(v)?,
            "learning_rate" => self.learning_rate = num(v)?,
            "selector_reward" => {
                self.selector_reward = match v {
                    "discounted" => SelectorReward::Discounted,
                    "indicator" => SelectorReward::Indicator,
                    _ => return Err(bad("discounted or indicator")),
                }
            }
            "shuffle_events" => self.shuffle_events = flag(v)?,
            "episodes" => self.episodes = int(v)?,
            "seeds" => self.seeds = parse_seeds(v).ok_or_else(|| bad("a seed list"))?,
            "output" => self.output = (!opt(v)).then(|| path(v)),
            "window" => self.window = int(v)?,
            "timing" => self.timing = flag(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses `key = value` lines. `include = path` reads another file in
    /// place; `#` starts a comment.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        cfg.apply_text(text, base, &mut errors, 0)?;
        if errors.is_empty() {
            return Ok(cfg);
        }
        // report range problems in the keys that did parse as well
        if let Err(HarnessError::Config(more)) = cfg.validate() {
            errors.extend(more);
        }
        Err(HarnessError::Config(errors))
    }

    fn apply_text(
        &mut self,
        text: &str,
        base: &Path,
        errors: &mut Vec<String>,
        depth: usize,
    ) -> Result<()> {
        if depth > 8 {
            errors.push("include nesting deeper than 8".into());
            return Ok(());
        }
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`", ln + 1));
                continue;
            };
            let key = key.trim();
            if key == "include" {
                let p = base.join(value.trim());
                let inner = read(&p)?;
                let inner_base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                self.apply_text(&inner, &inner_base, errors, depth + 1)?;
                continue;
            }
            if let Err(e) = self.set(key, value, base) {
                errors.push(format!("line {}: {e}", ln + 1));
            }
        }
        Ok(())
    }

    /// Overrides keys from `RMDECOMP_<KEY>` variables.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut errors = Vec::new();
        let cwd = PathBuf::from(".");
        for (name, value) in vars {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            if let Err(e) = self.set(&key, &value, &cwd) {
                errors.push(format!("{name}: {e}"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(errors))
        }
    }

    /// Reads a config file and applies environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut cfg = Self::parse(&text, &base)?;
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }

    /// Every violated field, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        if self.k == 0 {
            e.push("k must be at least 1".to_string());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            e.push(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            e.push(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                e.push(format!("gamma must lie in (0, 1), got {g}"));
            }
        }
        if let Some(p) = self.slip_prob {
            if !(0.0..=1.0).contains(&p) {
                e.push(format!("slip_prob must lie in [0, 1], got {p}"));
            }
        }
        if !(self.overall_bonus >= 0.0 && self.overall_bonus.is_finite()) {
            e.push(format!("overall_bonus must be non-negative, got {}", self.overall_bonus));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            e.push(format!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            e.push(format!("learning_rate must lie in (0, 1], got {}", self.learning_rate));
        }
        if self.seeds.is_empty() {
            e.push("seeds must not be empty".to_string());
        }
        if self.window == 0 {
            e.push("window must be at least 1".to_string());
        }
        for p in [&self.map, &self.rm, &self.constraints].into_iter().flatten() {
            if !p.exists() {
                e.push(format!("file not found: {}", p.display()));
            }
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(e))
        }
    }

    /// Flat text form, readable by [`parse`](Self::parse).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("default".into(), |p| p.display().to_string());
        let opt = |v: Option<String>| v.unwrap_or_else(|| "default".into());
        kv("env", self.env.name().into());
        kv("map", path(&self.map));
        kv("rm", path(&self.rm));
        kv("constraints", path(&self.constraints));
        kv("mode", self.mode.name().into());
        kv("k", self.k.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("gamma", opt(self.gamma.map(|v| v.to_string())));
        kv("slip_prob", opt(self.slip_prob.map(|v| v.to_string())));
        kv("max_steps", opt(self.max_steps.map(|v| v.to_string())));
        kv("overall_bonus", self.overall_bonus.to_string());
        kv("bonus_to_sink", self.bonus_to_sink.to_string());
        kv("condition_on_overall", self.condition_on_overall.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("selector_reward", self.selector_reward.name().into());
        kv("shuffle_events", self.shuffle_events.to_string());
        kv("episodes", self.episodes.to_string());
        kv(
            "seeds",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        kv("output", path(&self.output));
        kv("window", self.window.to_string());
        kv("timing", self.timing.to_string());
        out
    }
}

/// Everything a run needs, loaded and checked.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub game: GridGame,
    pub task: RewardMachine,
    pub constraints: GenerationConstraints,
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (map, rm, cons) = match config.env {
            EnvKind::FourButtons => (
                builtin::FOUR_BUTTONS_MAP,
                builtin::FOUR_BUTTONS_RM,
                builtin::FOUR_BUTTONS_CONSTRAINTS,
            ),
            EnvKind::CoopButtons => (
                builtin::COOP_BUTTONS_MAP,
                builtin::COOP_BUTTONS_RM,
                builtin::COOP_BUTTONS_CONSTRAINTS,
            ),
            EnvKind::Repairs => (builtin::REPAIRS_MAP, builtin::REPAIRS_RM, builtin::REPAIRS_CONSTRAINTS),
        };
        let load = |p: &Option<PathBuf>, fallback: &str| -> Result<String> {
            match p {
                Some(p) => read(p),
                None => Ok(fallback.to_string()),
            }
        };
        let mut spec = GridSpec::parse(&load(&config.map, map)?)?;
        if spec.kind != config.env {
            return Err(HarnessError::Config(vec![format!(
                "map is a {} map but env is {}",
                spec.kind.name(),
                config.env.name()
            )]));
        }
        if let Some(p) = config.slip_prob {
            spec.slip_prob = p;
        }
        if let Some(g) = config.gamma {
            spec.gamma = g;
        }
        if let Some(m) = config.max_steps {
            spec.max_steps = m;
        }
        let game = GridGame::new(spec)?;
        let task = parse_rm(&load(&config.rm, rm)?)?;
        let mut constraints =
            GenerationConstraints::parse(&load(&config.constraints, cons)?, Some(game.spec().agents.len()))?;
        constraints.k = config.k;
        constraints.validate()?;
        if constraints.n_agents() != game.spec().agents.len() {
            return Err(HarnessError::Config(vec![format!(
                "constraints describe {} agents, map has {}",
                constraints.n_agents(),
                game.spec().agents.len()
            )]));
        }
        Ok(Self {
            config: config.clone(),
            game,
            task,
            constraints,
        })
    }

    pub fn params(&self, seed: u64) -> TrainParams {
        let c = &self.config;
        TrainParams {
            mode: c.mode,
            k: c.k,
            alpha: c.alpha,
            beta: c.beta,
            gamma: self.game.spec().gamma,
            epsilon: c.epsilon,
            learning_rate: c.learning_rate,
            shaping: RewardShaping {
                sub_goal_reward: 1.0,
                overall_bonus: c.overall_bonus,
                bonus_to_sink: c.bonus_to_sink,
            },
            condition_on_overall: c.condition_on_overall,
            episodes: c.episodes,
            max_steps: self.game.spec().max_steps,
            seed,
            indicator_rewards: c.selector_reward == SelectorReward::Indicator,
            shuffle_events: c.shuffle_events,
            timing: c.timing,
        }
    }

    pub fn train_seed(&self, seed: u64) -> Result<TrainingLog> {
        Ok(train(&self.game, &self.task, &self.constraints, &self.params(seed))?)
    }

    /// Candidate set the given seed trains on.
    pub fn candidates(&self, seed: u64) -> Result<Vec<Decomposition>> {
        let mut rng = SimRng::seed_from_u64(seed);
        Ok(build_candidates(&self.task, &self.constraints, &self.params(seed), &mut rng)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    /// Best discounted team reward seen up to each episode.
    pub best_so_far: Vec<f64>,
    /// Rolling completion rate over the configured window.
    pub completion_rate: Vec<f64>,
    pub best_decomposition: usize,
    pub best_les: String,
    pub candidates: Vec<String>,
    /// Mean completion over the final `window` episodes.
    pub tail_completion: f64,
}

impl SeedSummary {
    pub fn from_log(seed: u64, log: &TrainingLog, window: usize) -> Self {
        let mut best = 0.0f64;
        let best_so_far = log
            .discounted_rewards()
            .into_iter()
            .map(|r| {
                best = best.max(r);
                best
            })
            .collect();
        let comp = log.completions();
        let completion_rate = rolling_mean(&comp, window);
        let tail = &comp[comp.len().saturating_sub(window)..];
        let tail_completion = if tail.is_empty() {
            0.0
        } else {
            tail.iter().filter(|&&c| c).count() as f64 / tail.len() as f64
        };
        Self {
            seed,
            best_so_far,
            completion_rate,
            best_decomposition: log.best,
            best_les: log.candidates.get(log.best).map(Decomposition::encode).unwrap_or_default(),
            candidates: log.candidates.iter().map(Decomposition::encode).collect(),
            tail_completion,
        }
    }

    /// First episode count at which the rolling completion rate reaches
    /// `threshold` over a full window.
    pub fn episodes_to_reach(&self, threshold: f64, window: usize) -> Option<usize> {
        self.completion_rate
            .iter()
            .enumerate()
            .skip(window.saturating_sub(1))
            .find(|(_, &r)| r >= threshold)
            .map(|(i, _)| i + 1)
    }
}

/// Mean over the trailing `window` entries (fewer at the start).
pub fn rolling_mean(xs: &[bool], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0usize;
    for i in 0..xs.len() {
        sum += usize::from(xs[i]);
        if i >= window {
            sum -= usize::from(xs[i - window]);
        }
        out.push(sum as f64 / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seeds: Vec<SeedSummary>,
    pub mean_best: Vec<f64>,
    pub std_best: Vec<f64>,
    pub mean_completion: Vec<f64>,
}

fn mean_std(columns: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let len = columns.iter().map(|c| c.len()).min().unwrap_or(0);
    let n = columns.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut std = Vec::with_capacity(len);
    for i in 0..len {
        let m = columns.iter().map(|c| c[i]).sum::<f64>() / n;
        let v = columns.iter().map(|c| (c[i] - m).powi(2)).sum::<f64>() / n;
        mean.push(m);
        std.push(v.sqrt());
    }
    (mean, std)
}

impl RunSummary {
    pub fn from_seeds(seeds: Vec<SeedSummary>) -> Self {
        let best: Vec<&[f64]> = seeds.iter().map(|s| s.best_so_far.as_slice()).collect();
        let comp: Vec<&[f64]> = seeds.iter().map(|s| s.completion_rate.as_slice()).collect();
        let (mean_best, std_best) = mean_std(&best);
        let (mean_completion, _) = mean_std(&comp);
        Self {
            seeds,
            mean_best,
            std_best,
            mean_completion,
        }
    }

    pub fn mean_tail_completion(&self) -> f64 {
        if self.seeds.is_empty() {
            return 0.0;
        }
        self.seeds.iter().map(|s| s.tail_completion).sum::<f64>() / self.seeds.len() as f64
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("episode,mean_best,std_best,mean_completion\n");
        for i in 0..self.mean_best.len() {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                i,
                self.mean_best[i],
                self.std_best[i],
                self.mean_completion[i]
            );
        }
        out
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        for s in &self.seeds {
            let _ = writeln!(
                out,
                "seed {}: best decomposition {} [{}], final best reward {:.4}, tail completion {:.3}",
                s.seed,
                s.best_decomposition,
                s.best_les,
                s.best_so_far.last().copied().unwrap_or(0.0),
                s.tail_completion
            );
        }
        let _ = writeln!(out, "mean tail completion {:.3}", self.mean_tail_completion());
        out
    }
}

/// Minimal line chart: axes plus one polyline per series, y in [0, 1].
pub fn svg_chart(title: &str, series: &[(&str, &[f64])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let len = series.iter().map(|(_, s)| s.len()).max().unwrap_or(0).max(2);
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (len - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v.clamp(0.0, 1.0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{PAD}" y="24" font-family="sans-serif" font-size="14">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<polyline points="{PAD},{PAD} {PAD},{} {},{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
        W - PAD - 40.0,
        H - PAD + 16.0,
        len - 1
    );
    for (k, (name, s)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        // thin long curves to at most ~1000 points
        let stride = (s.len() / 1000).max(1);
        let pts: Vec<String> = s
            .iter()
            .enumerate()
            .filter(|(i, _)| i % stride == 0 || *i + 1 == s.len())
            .map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 14.0 * (k as f64 + 1.0),
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Trains every seed, in parallel, and reduces in seed order.
pub fn train_seeds(exp: &Experiment) -> Result<Vec<(u64, TrainingLog)>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let seeds = &exp.config.seeds;
    let mut results: Vec<Option<Result<TrainingLog>>> = (0..seeds.len()).map(|_| None).collect();
    for chunk in (0..seeds.len()).collect::<Vec<_>>().chunks(workers) {
        let done: Vec<(usize, Result<TrainingLog>)> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| (i, s.spawn(move || exp.train_seed(seeds[i]))))
                .collect();
            handles
                .into_iter()
                .map(|(i, h)| (i, h.join().expect("training thread panicked")))
                .collect()
        });
        for (i, r) in done {
            results[i] = Some(r);
        }
    }
    seeds
        .iter()
        .zip(results)
        .map(|(&s, r)| r.expect("every seed ran").map(|log| (s, log)))
        .collect()
}

/// Writes per-seed logs, the aggregate curve and a chart under `dir`.
pub fn write_outputs(
    dir: &Path,
    exp: &Experiment,
    logs: &[(u64, TrainingLog)],
    summary: &RunSummary,
) -> Result<()> {
    write(&dir.join("config.txt"), &exp.config.to_text())?;
    for (seed, log) in logs {
        write(&dir.join(format!("seed_{seed}.csv")), &log.csv())?;
        write(&dir.join(format!("seed_{seed}_selector.csv")), &log.selector_trace())?;
        write(&dir.join(format!("seed_{seed}_candidates.txt")), &write_decompositions(&log.candidates))?;
        write(&dir.join(format!("seed_{seed}_policy.txt")), &log.policy.dump())?;
    }
    write(&dir.join("aggregate.csv"), &summary.aggregate_csv())?;
    write(&dir.join("summary.txt"), &summary.report())?;
    let title = format!("{} on {}", exp.config.mode.name(), exp.config.env.name());
    write(
        &dir.join("curve.svg"),
        &svg_chart(
            &title,
            &[
                ("best discounted reward", &summary.mean_best),
                ("completion rate", &summary.mean_completion),
            ],
        ),
    )?;
    Ok(())
}

pub fn run(config: &ExperimentConfig) -> Result<RunSummary> {
    let exp = Experiment::prepare(config)?;
    let logs = train_seeds(&exp)?;
    let summary = RunSummary::from_seeds(
        logs.iter()
            .map(|(s, log)| SeedSummary::from_log(*s, log, config.window))
            .collect(),
    );
    if let Some(dir) = &config.output {
        write_outputs(dir, &exp, &logs, &summary)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub k: usize,
    /// Candidates actually available, which may be fewer than `k`.
    pub available: usize,
    pub summary: RunSummary,
}

/// One run per `k` with shared seeds. Output for each lands in `k_<k>/`.
pub fn sweep_k(config: &ExperimentConfig, ks: &[usize]) -> Result<Vec<SweepEntry>> {
    if let Some(&bad) = ks.iter().find(|&&k| k == 0) {
        return Err(HarnessError::Config(vec![format!("k must be at least 1, got {bad}")]));
    }
    let mut out = Vec::new();
    for &k in ks {
        let mut c = config.clone();
        c.k = k;
        c.output = config.output.as_ref().map(|d| d.join(format!("k_{k}")));
        let summary = run(&c)?;
        let available = summary.seeds.first().map_or(0, |s| s.candidates.len());
        if available < k {
            eprintln!("warning: k={k} exceeds the {available} valid decompositions; using all of them");
        }
        out.push(SweepEntry { k, available, summary });
    }
    if let Some(dir) = &config.output {
        write(&dir.join("comparison.csv"), &sweep_table(&out))?;
        let series: Vec<(String, &[f64])> = out
            .iter()
            .map(|e| (format!("k={}", e.k), e.summary.mean_best.as_slice()))
            .collect();
        let refs: Vec<(&str, &[f64])> = series.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        write(&dir.join("sweep.svg"), &svg_chart("best discounted reward by k", &refs))?;
    }
    Ok(out)
}

pub fn sweep_table(entries: &[SweepEntry]) -> String {
    let mut out = String::from("k,candidates,final_mean_best,mean_tail_completion\n");
    for e in entries {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6}",
            e.k,
            e.available,
            e.summary.mean_best.last().copied().unwrap_or(0.0),
            e.summary.mean_tail_completion()
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateVerdict {
    pub decomposition: Decomposition,
    pub valid: bool,
    /// Exhaustive trace comparison, run for small alphabets only.
    pub trace_equivalent: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub candidates: Vec<CandidateVerdict>,
    pub warnings: Vec<String>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        for c in &self.candidates {
            let d = &c.decomposition;
            writeln!(f, "candidate {} score {:.4}", d.id, d.score)?;
            for l in &d.les {
                let evs: Vec<&str> = l.events.iter().map(|e| e.as_str()).collect();
                writeln!(f, "  agent {}: {{{}}}", l.agent + 1, evs.join(", "))?;
            }
            writeln!(f, "  valid: {}", if c.valid { "yes" } else { "no" })?;
            match c.trace_equivalent {
                Some(true) => writeln!(f, "  trace check: equivalent")?,
                Some(false) => writeln!(f, "  trace check: MISMATCH")?,
                None => writeln!(f, "  trace check: skipped (alphabet too large)")?,
            }
        }
        Ok(())
    }
}

pub fn validate_decompositions(
    task: &RewardMachine,
    constraints: &GenerationConstraints,
    k: usize,
) -> Result<ValidationReport> {
    let mut warnings = Vec::new();
    if !task.goal_reachable() {
        warnings.push("task unsatisfiable by any trace".to_string());
    }
    let mut c = constraints.clone();
    c.k = k;
    let ds = enumerate_candidates(task, c.n_agents(), &c)?;
    if ds.len() < k {
        warnings.push(format!("only {} valid decompositions exist (k = {k})", ds.len()));
    }
    let brute = task.alphabet().len() <= BRUTE_FORCE_MAX_EVENTS;
    let candidates = ds
        .into_iter()
        .map(|d| {
            let valid = is_valid(task, &d);
            let trace_equivalent = brute.then(|| {
                let subs: Vec<&RewardMachine> = d.subtasks.iter().map(|s| &s.machine).collect();
                trace_counterexample(task, &subs, 2 * task.num_states()).is_none()
            });
            CandidateVerdict {
                decomposition: d,
                valid,
                trace_equivalent,
            }
        })
        .collect();
    Ok(ValidationReport { candidates, warnings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub completion_rate: f64,
    pub mean_discounted_reward: f64,
    pub mean_sub_rewards: Vec<f64>,
}

fn frozen_options(exp: &Experiment) -> EpisodeOptions {
    EpisodeOptions {
        max_steps: exp.game.spec().max_steps,
        gamma: exp.game.spec().gamma,
        condition_on_overall: exp.config.condition_on_overall,
        learn: false,
        shuffle_events: exp.config.shuffle_events,
    }
}

fn pick(candidates: &[Decomposition], id: usize) -> Result<&Decomposition> {
    candidates.get(id).ok_or_else(|| {
        HarnessError::Config(vec![format!(
            "decomposition {id} out of range ({} candidates)",
            candidates.len()
        )])
    })
}

/// Greedy rollouts of a frozen policy. Episode `i` uses rng seed `seed + i`,
/// so results do not depend on how episodes are spread over threads.
pub fn eval(
    exp: &Experiment,
    policy: &TaskConditionedPolicy,
    decomposition: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let candidates = exp.candidates(seed)?;
    let active = ActiveDecomposition::new(&exp.task, pick(&candidates, decomposition)?);
    let vocab = vocabulary_map(&exp.game, &exp.task);
    let opts = frozen_options(exp);
    let shaping = RewardShaping::default();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(episodes.max(1));
    let per = episodes.div_ceil(workers.max(1));
    let chunks: Vec<Result<Vec<(bool, f64, Vec<f64>)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (active, vocab) = (&active, &vocab);
                let mut policy = policy.clone();
                s.spawn(move || {
                    let mut out = Vec::new();
                    for i in (w * per)..((w + 1) * per).min(episodes) {
                        let mut rng = SimRng::seed_from_u64(seed.wrapping_add(i as u64));
                        let r = run_episode(
                            &exp.game, &exp.task, vocab, active, &mut policy, &shaping, &opts,
                            &mut rng, None,
                        )?;
                        out.push((r.completed, r.discounted_overall(opts.gamma), r.sub_rewards));
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval thread panicked")).collect()
    });
    let mut done = 0usize;
    let mut disc = 0.0;
    let n = active.n_agents();
    let mut subs = vec![0.0; n];
    let mut count = 0usize;
    for chunk in chunks {
        for (c, d, s) in chunk? {
            count += 1;
            done += usize::from(c);
            disc += d;
            for (acc, v) in subs.iter_mut().zip(s) {
                *acc += v;
            }
        }
    }
    let denom = count.max(1) as f64;
    Ok(EvalSummary {
        episodes: count,
        completion_rate: done as f64 / denom,
        mean_discounted_reward: disc / denom,
        mean_sub_rewards: subs.into_iter().map(|v| v / denom).collect(),
    })
}

/// One greedy episode with its event and machine-state trace.
pub fn replay(
    exp: &Experiment,
    policy: &TaskConditionedPolicy,
    decomposition: usize,
    seed: u64,
) -> Result<(Vec<TraceStep>, bool)> {
    let candidates = exp.candidates(seed)?;
    let active = ActiveDecomposition::new(&exp.task, pick(&candidates, decomposition)?);
    let vocab = vocabulary_map(&exp.game, &exp.task);
    let mut rng = SimRng::seed_from_u64(seed);
    let mut trace = Vec::new();
    let mut policy = policy.clone();
    let r = run_episode(
        &exp.game,
        &exp.task,
        &vocab,
        &active,
        &mut policy,
        &RewardShaping::default(),
        &frozen_options(exp),
        &mut rng,
        Some(&mut trace),
    )?;
    Ok((trace, r.completed))
}

pub fn format_trace(trace: &[TraceStep]) -> String {
    let mut out = String::from("step\tactions\tevents\toverall\tsub-states\n");
    for t in trace {
        let acts: Vec<String> = t.actions.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            t.step,
            acts.join(","),
            if t.events.is_empty() { "-".to_string() } else { t.events.join(",") },
            t.overall,
            t.subs.join(",")
        );
    }
    out
}

/// Keys with a non-default value, for diagnostics.
pub fn changed_keys(config: &ExperimentConfig) -> BTreeMap<String, String> {
    let base: BTreeMap<String, String> = parse_pairs(&ExperimentConfig::default().to_text());
    parse_pairs(&config.to_text())
        .into_iter()
        .filter(|(k, v)| base.get(k) != Some(v))
        .collect()
}

fn parse_pairs(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
