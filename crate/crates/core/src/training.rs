//! Synchronized multi-RM rollouts, the task-conditioned tabular learner and
//! the outer loop that couples decomposition selection to learning.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::decomp::{
    enumerate_candidates, make_accident_avoidance, DecompError, Decomposition,
    GenerationConstraints,
};
use crate::envs::{Action, EnvError, MarkovGame, Observation, SimRng};
use crate::rm::{EventId, RewardMachine, RmConfiguration, StateId};
use crate::selection::{trace_header, trace_row, SelectionError, SelectorState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Decomp(#[from] DecompError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("non-finite action value for key {0:?}")]
    NonFinite(QKey),
    #[error("every sub-task reached its goal but the team task did not (decomposition {0})")]
    ValidityViolation(usize),
    #[error("invalid training parameters: {0}")]
    BadParameters(String),
    #[error("policy table line {line}: {msg}")]
    PolicyParse { line: usize, msg: String },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// A decomposition prepared for rollouts: accident-avoided sub-RMs plus
/// event lookup tables keyed by team-task event id.
#[derive(Debug, Clone)]
pub struct ActiveDecomposition {
    pub id: usize,
    pub subs: Vec<RewardMachine>,
    sharers: Vec<Vec<usize>>,
    local: Vec<Vec<Option<EventId>>>,
    /// Added to sub-RM state ids so that different sub-tasks of one
    /// decomposition never share a table key. Agents with equal local event
    /// sets pursue the same sub-task and share an offset.
    offsets: Vec<usize>,
}

impl ActiveDecomposition {
    pub fn new(task: &RewardMachine, d: &Decomposition) -> Self {
        let subs: Vec<RewardMachine> = d
            .subtasks
            .iter()
            .map(|s| make_accident_avoidance(s, task, &d.les).machine)
            .collect();
        let sharers = task
            .alphabet()
            .iter()
            .map(|e| {
                d.les
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| l.contains(e.as_str()))
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        let local = subs
            .iter()
            .map(|m| {
                task.alphabet()
                    .iter()
                    .map(|e| m.event_id(e.as_str()).ok())
                    .collect()
            })
            .collect();
        let mut offsets = Vec::with_capacity(subs.len());
        let mut next = 0;
        for (i, m) in subs.iter().enumerate() {
            match (0..i).find(|&j| d.les[j].events == d.les[i].events) {
                Some(j) => offsets.push(offsets[j]),
                None => {
                    offsets.push(next);
                    next += m.num_states();
                }
            }
        }
        Self {
            id: d.id,
            subs,
            sharers,
            local,
            offsets,
        }
    }

    /// Table-key encoding of agent `i`'s sub-RM state.
    pub fn encode_state(&self, i: usize, u: StateId) -> usize {
        self.offsets[i] + u.0
    }

    pub fn n_agents(&self) -> usize {
        self.subs.len()
    }

    /// Agents whose local event set contains team event `e`.
    pub fn sharers(&self, e: EventId) -> &[usize] {
        &self.sharers[e.0]
    }
}

#[derive(Debug, Clone)]
pub struct TeamTaskState<'a> {
    pub overall: RmConfiguration<'a>,
    pub subs: Vec<RmConfiguration<'a>>,
    pub done_overall: bool,
    pub done_sub: Vec<bool>,
}

impl<'a> TeamTaskState<'a> {
    pub fn new(task: &'a RewardMachine, active: &'a ActiveDecomposition) -> Self {
        let subs: Vec<RmConfiguration<'a>> = active.subs.iter().map(RmConfiguration::new).collect();
        Self {
            overall: RmConfiguration::new(task),
            done_overall: task.is_goal(task.initial()),
            done_sub: subs.iter().map(RmConfiguration::in_goal).collect(),
            subs,
        }
    }

    /// Every sub-task is in a goal or a sink.
    pub fn all_resolved(&self) -> bool {
        self.subs.iter().all(|s| s.in_goal() || s.in_sink())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRewards {
    pub sub: Vec<u8>,
    pub overall: u8,
}

/// Processes `events` (team-task ids) in ascending id order, which is the
/// lexicographic order of their names. See [`sync_step_ordered`].
pub fn sync_step(
    active: &ActiveDecomposition,
    tts: &mut TeamTaskState<'_>,
    events: &[EventId],
) -> StepRewards {
    let mut order = events.to_vec();
    order.sort_unstable();
    order.dedup();
    sync_step_ordered(active, tts, &order)
}

/// Processes `events` in the order given.
///
/// The team machine always steps. A shared event moves the sub-machines of
/// all its sharers if each of them has a transition on it, and none of them
/// otherwise. An event shared by nobody moves every sub-machine that has a
/// transition on it, which only the accident sinks provide.
pub fn sync_step_ordered(
    active: &ActiveDecomposition,
    tts: &mut TeamTaskState<'_>,
    events: &[EventId],
) -> StepRewards {
    let n = tts.subs.len();
    let mut out = StepRewards {
        sub: vec![0; n],
        overall: 0,
    };
    for &e in events {
        out.overall |= tts.overall.apply(e);
        let sharers = active.sharers(e);
        if sharers.is_empty() {
            for i in 0..n {
                if let Some(le) = active.local[i][e.0] {
                    if tts.subs[i].machine().defined(tts.subs[i].current(), le).is_some() {
                        out.sub[i] |= tts.subs[i].apply(le);
                    }
                }
            }
            continue;
        }
        let ready = sharers.iter().all(|&i| {
            active.local[i][e.0]
                .is_some_and(|le| tts.subs[i].machine().defined(tts.subs[i].current(), le).is_some())
        });
        if ready {
            for &i in sharers {
                let le = active.local[i][e.0].expect("sharer has the event");
                out.sub[i] |= tts.subs[i].apply(le);
            }
        }
    }
    tts.done_overall |= tts.overall.in_goal();
    for (done, s) in tts.done_sub.iter_mut().zip(&tts.subs) {
        *done |= s.in_goal();
    }
    out
}

/// Table key: what one agent conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QKey {
    pub obs: Observation,
    pub decomposition: usize,
    pub sub_state: usize,
    /// `None` when the policy is not conditioned on the team task.
    pub overall_state: Option<usize>,
}

/// Action selection and value updates behind one interface so the rollout
/// loop does not depend on the tabular representation.
pub trait Learner {
    fn act(&self, key: &QKey, explore: bool, rng: &mut SimRng) -> Action;
    fn update(
        &mut self,
        key: &QKey,
        action: Action,
        reward: f64,
        next: &QKey,
        terminal: bool,
    ) -> Result<()>;
}

/// One action-value table shared by all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConditionedPolicy {
    table: HashMap<QKey, [f64; 5]>,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub gamma: f64,
}

const ZERO_ROW: [f64; 5] = [0.0; 5];

impl TaskConditionedPolicy {
    pub fn new(epsilon: f64, learning_rate: f64, gamma: f64) -> Result<Self> {
        let p = Self {
            table: HashMap::new(),
            epsilon,
            learning_rate,
            gamma,
        };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&self.epsilon) {
            bad.push(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            bad.push(format!("learning_rate {} outside (0, 1]", self.learning_rate));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            bad.push(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(TrainError::BadParameters(bad.join("; ")))
        }
    }

    pub fn row(&self, key: &QKey) -> [f64; 5] {
        self.table.get(key).copied().unwrap_or(ZERO_ROW)
    }

    pub fn set_row(&mut self, key: QKey, row: [f64; 5]) -> Result<()> {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite(key));
        }
        self.table.insert(key, row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// One line per key, sorted: `r c decomposition sub overall|- : q0 .. q4`.
    pub fn dump(&self) -> String {
        let mut keys: Vec<&QKey> = self.table.keys().collect();
        keys.sort();
        let mut out = String::new();
        for k in keys {
            let overall = k.overall_state.map_or("-".to_string(), |u| u.to_string());
            let row = self.table[k].map(|v| v.to_string()).join(" ");
            let _ = writeln!(
                out,
                "{} {} {} {} {} : {}",
                k.obs.0, k.obs.1, k.decomposition, k.sub_state, overall, row
            );
        }
        out
    }

    /// Reads a table written by [`dump`](Self::dump) into a fresh policy.
    pub fn load(text: &str, epsilon: f64, learning_rate: f64, gamma: f64) -> Result<Self> {
        let mut p = Self::new(epsilon, learning_rate, gamma)?;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| TrainError::PolicyParse {
                line: ln + 1,
                msg: msg.to_string(),
            };
            let (lhs, rhs) = line.split_once(':').ok_or_else(|| err("missing `:`"))?;
            let k: Vec<&str> = lhs.split_whitespace().collect();
            if k.len() != 5 {
                return Err(err("expected 5 key fields"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| err("bad integer"));
            let key = QKey {
                obs: (
                    k[0].parse().map_err(|_| err("bad row"))?,
                    k[1].parse().map_err(|_| err("bad column"))?,
                ),
                decomposition: int(k[2])?,
                sub_state: int(k[3])?,
                overall_state: if k[4] == "-" { None } else { Some(int(k[4])?) },
            };
            let vals: Vec<f64> = rhs
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| err("bad value")))
                .collect::<Result<_>>()?;
            let row: [f64; 5] = vals.try_into().map_err(|_| err("expected 5 values"))?;
            p.set_row(key, row).map_err(|_| err("non-finite value"))?;
        }
        Ok(p)
    }
}

impl Learner for TaskConditionedPolicy {
    /// Epsilon-greedy; ties among maximal actions are broken uniformly.
    fn act(&self, key: &QKey, explore: bool, rng: &mut SimRng) -> Action {
        if explore && rng.gen::<f64>() < self.epsilon {
            return Action::from_index(rng.gen_range(0..5));
        }
        let row = self.row(key);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut best = [0usize; 5];
        let mut n = 0;
        for (i, &v) in row.iter().enumerate() {
            if v == max {
                best[n] = i;
                n += 1;
            }
        }
        let pick = if n == 1 { best[0] } else { best[rng.gen_range(0..n)] };
        Action::from_index(pick)
    }

    fn update(
        &mut self,
        key: &QKey,
        action: Action,
        reward: f64,
        next: &QKey,
        terminal: bool,
    ) -> Result<()> {
        let bootstrap = if terminal {
            0.0
        } else {
            self.row(next).iter().copied().fold(f64::NEG_INFINITY, f64::max)
        };
        let target = reward + self.gamma * bootstrap;
        let lr = self.learning_rate;
        let row = self.table.entry(*key).or_insert(ZERO_ROW);
        let q = &mut row[action.index()];
        let updated = *q + lr * (target - *q);
        if !updated.is_finite() {
            return Err(TrainError::NonFinite(*key));
        }
        *q = updated;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardShaping {
    pub sub_goal_reward: f64,
    pub overall_bonus: f64,
    /// Grant the team bonus to agents whose sub-task ended in a sink.
    pub bonus_to_sink: bool,
}

impl Default for RewardShaping {
    fn default() -> Self {
        Self {
            sub_goal_reward: 1.0,
            overall_bonus: 0.1,
            bonus_to_sink: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    /// `gamma^t` at the step the sub-goal was entered, else 0.
    pub sub_rewards: Vec<f64>,
    pub sub_completed: Vec<bool>,
    pub completed: bool,
    pub completion_step: Option<usize>,
    pub steps: usize,
}

impl EpisodeResult {
    /// `gamma^t` for the team task, 0 if it was not completed.
    pub fn discounted_overall(&self, gamma: f64) -> f64 {
        self.completion_step.map_or(0.0, |t| gamma.powi(t as i32))
    }
}

/// One step of a recorded rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub actions: Vec<Action>,
    pub events: Vec<String>,
    pub overall: String,
    pub subs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOptions {
    pub max_steps: usize,
    /// Discount used for the sub-task rewards.
    pub gamma: f64,
    pub condition_on_overall: bool,
    /// Explore and update the learner; off for frozen evaluation.
    pub learn: bool,
    /// Process simultaneous events in a random order drawn from the episode
    /// rng instead of name order.
    pub shuffle_events: bool,
}

/// Maps environment vocabulary ids to team-task event ids.
pub fn vocabulary_map<G: MarkovGame>(env: &G, task: &RewardMachine) -> Vec<Option<EventId>> {
    env.vocabulary()
        .iter()
        .map(|e| task.event_id(e.as_str()).ok())
        .collect()
}

fn key_for(
    obs: Observation,
    active: &ActiveDecomposition,
    tts: &TeamTaskState<'_>,
    agent: usize,
    condition_on_overall: bool,
) -> QKey {
    QKey {
        obs,
        decomposition: active.id,
        sub_state: active.encode_state(agent, tts.subs[agent].current()),
        overall_state: condition_on_overall.then(|| tts.overall.current().0),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn run_episode<G: MarkovGame, L: Learner>(
    env: &G,
    task: &RewardMachine,
    vocab: &[Option<EventId>],
    active: &ActiveDecomposition,
    learner: &mut L,
    shaping: &RewardShaping,
    opts: &EpisodeOptions,
    rng: &mut SimRng,
    mut trace: Option<&mut Vec<TraceStep>>,
) -> Result<EpisodeResult> {
    let n = env.n_agents();
    if active.n_agents() != n {
        return Err(TrainError::BadParameters(format!(
            "decomposition has {} agents, environment has {n}",
            active.n_agents()
        )));
    }
    let mut tts = TeamTaskState::new(task, active);
    let mut result = EpisodeResult {
        sub_rewards: tts.done_sub.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect(),
        sub_completed: tts.done_sub.clone(),
        completed: tts.done_overall,
        completion_step: tts.done_overall.then_some(0),
        steps: 0,
    };
    if tts.done_sub.iter().all(|&d| d) && !tts.done_overall {
        return Err(TrainError::ValidityViolation(active.id));
    }
    if tts.done_overall || tts.all_resolved() {
        return Ok(result);
    }

    let mut s = env.reset(rng);
    let mut keys: Vec<QKey> = Vec::with_capacity(n);
    let mut actions: Vec<Action> = Vec::with_capacity(n);
    let mut events: Vec<EventId> = Vec::new();
    for t in 0..opts.max_steps {
        keys.clear();
        actions.clear();
        for i in 0..n {
            let k = key_for(env.observe(&s, i), active, &tts, i, opts.condition_on_overall);
            actions.push(learner.act(&k, opts.learn, rng));
            keys.push(k);
        }
        let next = env.step(&s, &actions, rng)?;
        events.clear();
        events.extend(env.label(&s, &next).into_iter().filter_map(|v| vocab[v]));
        events.sort_unstable();
        events.dedup();
        if opts.shuffle_events && events.len() > 1 {
            events.shuffle(rng);
        }
        let r = sync_step_ordered(active, &mut tts, &events);
        let step = t + 1;
        result.steps = step;

        for i in 0..n {
            if r.sub[i] == 1 {
                result.sub_rewards[i] = opts.gamma.powi(step as i32);
                result.sub_completed[i] = true;
            }
        }
        if r.overall == 1 {
            result.completed = true;
            result.completion_step = Some(step);
        }
        if tts.done_sub.iter().all(|&d| d) && !tts.overall.in_goal() {
            return Err(TrainError::ValidityViolation(active.id));
        }
        let terminal = tts.overall.in_goal() || tts.all_resolved();

        if let Some(tr) = trace.as_deref_mut() {
            tr.push(TraceStep {
                step,
                actions: actions.clone(),
                events: events.iter().map(|&e| task.event_name(e).to_string()).collect(),
                overall: task.state_name(tts.overall.current()).to_string(),
                subs: tts
                    .subs
                    .iter()
                    .map(|c| c.machine().state_name(c.current()).to_string())
                    .collect(),
            });
        }

        if opts.learn {
            for i in 0..n {
                let mut reward = f64::from(r.sub[i]) * shaping.sub_goal_reward;
                if r.overall == 1 && (shaping.bonus_to_sink || !tts.subs[i].in_sink()) {
                    reward += shaping.overall_bonus;
                }
                let nk = key_for(env.observe(&next, i), active, &tts, i, opts.condition_on_overall);
                learner.update(&keys[i], actions[i], reward, &nk, terminal)?;
            }
        }
        s = next;
        if terminal {
            break;
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Lotad,
    AtadFixed,
    Monolithic,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Lotad => "lotad",
            Mode::AtadFixed => "atad_fixed",
            Mode::Monolithic => "monolithic",
        }
    }

    pub fn from_name(s: &str) -> Option<Mode> {
        match s {
            "lotad" => Some(Mode::Lotad),
            "atad_fixed" | "atad-fixed" | "atad" => Some(Mode::AtadFixed),
            "monolithic" => Some(Mode::Monolithic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub mode: Mode,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub shaping: RewardShaping,
    pub condition_on_overall: bool,
    pub episodes: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Feed the selector 0/1 completion indicators instead of `gamma^t`.
    pub indicator_rewards: bool,
    pub shuffle_events: bool,
    /// Adds a wall-clock column to the log, which breaks byte-identity.
    pub timing: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            mode: Mode::Lotad,
            k: 10,
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.95,
            epsilon: 0.05,
            learning_rate: 0.2,
            shaping: RewardShaping::default(),
            condition_on_overall: true,
            episodes: 1000,
            max_steps: 100,
            seed: 0,
            indicator_rewards: false,
            shuffle_events: false,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub selected: usize,
    pub sub_rewards: Vec<f64>,
    pub completed: bool,
    pub completion_step: Option<usize>,
    pub visits: Vec<u64>,
    pub scores: Vec<f64>,
    pub bonuses: Vec<f64>,
    pub wall_ms: Option<u128>,
}

#[derive(Debug, Clone)]
pub struct TrainingLog {
    pub mode: Mode,
    pub gamma: f64,
    pub candidates: Vec<Decomposition>,
    pub episodes: Vec<EpisodeLog>,
    /// Index into `candidates` of the best-scoring decomposition.
    pub best: usize,
    pub policy: TaskConditionedPolicy,
}

impl TrainingLog {
    pub fn n_agents(&self) -> usize {
        self.candidates.first().map_or(0, Decomposition::n_agents)
    }

    pub fn csv(&self) -> String {
        let n = self.n_agents();
        let arms = self.candidates.len();
        let mut cols = vec!["episode".to_string(), "selected_decomposition".to_string()];
        cols.extend((0..n).map(|i| format!("reward_{i}")));
        cols.push("overall_completed".into());
        cols.push("completion_step".into());
        cols.extend((0..arms).map(|j| format!("n_{j}")));
        cols.extend((0..arms).map(|j| format!("score_{j}")));
        let timed = self.episodes.iter().any(|e| e.wall_ms.is_some());
        if timed {
            cols.push("wall_ms".into());
        }
        let mut out = cols.join(",");
        out.push('\n');
        for e in &self.episodes {
            let mut row = vec![e.episode.to_string(), e.selected.to_string()];
            row.extend(e.sub_rewards.iter().map(|r| format!("{r:.6}")));
            row.push(u8::from(e.completed).to_string());
            row.push(e.completion_step.map_or(String::new(), |t| t.to_string()));
            row.extend(e.visits.iter().map(u64::to_string));
            row.extend(e.scores.iter().map(|s| format!("{s:.6}")));
            if timed {
                row.push(e.wall_ms.map_or(String::new(), |t| t.to_string()));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Selector trace: visits, scores and exploration bonuses per episode.
    pub fn selector_trace(&self) -> String {
        let mut out = trace_header(self.candidates.len());
        out.push('\n');
        for e in &self.episodes {
            let snap = crate::selection::SelectorSnapshot {
                selected: e.selected,
                visits: e.visits.clone(),
                scores: e.scores.clone(),
                bonuses: e.bonuses.clone(),
            };
            out.push_str(&trace_row(e.episode as u64, &snap));
            out.push('\n');
        }
        out
    }

    /// Discounted team reward per episode.
    pub fn discounted_rewards(&self) -> Vec<f64> {
        self.episodes
            .iter()
            .map(|e| e.completion_step.map_or(0.0, |t| self.gamma.powi(t as i32)))
            .collect()
    }

    pub fn completions(&self) -> Vec<bool> {
        self.episodes.iter().map(|e| e.completed).collect()
    }
}

/// Candidate set for `mode`.
pub fn build_candidates(
    task: &RewardMachine,
    constraints: &GenerationConstraints,
    params: &TrainParams,
    rng: &mut SimRng,
) -> Result<Vec<Decomposition>> {
    let n = constraints.n_agents();
    match params.mode {
        Mode::Lotad => {
            let mut c = constraints.clone();
            c.k = params.k;
            Ok(enumerate_candidates(task, n, &c)?)
        }
        Mode::AtadFixed => {
            let mut c = constraints.clone();
            c.k = usize::MAX;
            let all = enumerate_candidates(task, n, &c)?;
            let top = all[0].score;
            let mut ties: Vec<Decomposition> =
                all.into_iter().take_while(|d| d.score == top).collect();
            ties.shuffle(rng);
            let mut d = ties.swap_remove(0);
            d.id = 0;
            Ok(vec![d])
        }
        Mode::Monolithic => Ok(vec![Decomposition::monolithic(
            task,
            n,
            constraints.w_size,
            constraints.w_balance,
        )]),
    }
}

pub fn train<G: MarkovGame>(
    env: &G,
    task: &RewardMachine,
    constraints: &GenerationConstraints,
    params: &TrainParams,
) -> Result<TrainingLog> {
    if params.k == 0 {
        return Err(TrainError::BadParameters("k must be at least 1".into()));
    }
    if constraints.n_agents() != env.n_agents() {
        return Err(TrainError::BadParameters(format!(
            "constraints describe {} agents, environment has {}",
            constraints.n_agents(),
            env.n_agents()
        )));
    }
    let mut rng = SimRng::seed_from_u64(params.seed);
    let candidates = build_candidates(task, constraints, params, &mut rng)?;
    let active: Vec<ActiveDecomposition> = candidates
        .iter()
        .map(|d| ActiveDecomposition::new(task, d))
        .collect();
    let agents: Vec<usize> = candidates.iter().map(Decomposition::n_agents).collect();
    let mut selector = SelectorState::new(&agents, params.alpha, params.beta)?;
    let mut policy = TaskConditionedPolicy::new(params.epsilon, params.learning_rate, params.gamma)?;
    let vocab = vocabulary_map(env, task);
    let opts = EpisodeOptions {
        max_steps: params.max_steps,
        gamma: params.gamma,
        condition_on_overall: params.condition_on_overall,
        learn: true,
        shuffle_events: params.shuffle_events,
    };
    let start = Instant::now();
    let mut episodes = Vec::with_capacity(params.episodes);
    for ep in 0..params.episodes {
        let j = selector.select();
        let res = run_episode(
            env,
            task,
            &vocab,
            &active[j],
            &mut policy,
            &params.shaping,
            &opts,
            &mut rng,
            None,
        )?;
        if params.indicator_rewards {
            let ind: Vec<f64> = res.sub_completed.iter().map(|&c| f64::from(u8::from(c))).collect();
            selector.record_episode(j, &ind)?;
        } else {
            selector.record_episode(j, &res.sub_rewards)?;
        }
        let snap = selector.snapshot(j);
        episodes.push(EpisodeLog {
            episode: ep,
            selected: j,
            sub_rewards: res.sub_rewards,
            completed: res.completed,
            completion_step: res.completion_step,
            visits: snap.visits,
            scores: snap.scores,
            bonuses: snap.bonuses,
            wall_ms: params.timing.then(|| start.elapsed().as_millis()),
        });
    }
    Ok(TrainingLog {
        mode: params.mode,
        gamma: params.gamma,
        best: selector.best(),
        candidates,
        episodes,
        policy,
    })
}
