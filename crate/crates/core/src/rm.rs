//! Task-completion reward machines.
//!
//! A reward machine is a deterministic, partial transition system over named
//! events. Undefined `(state, event)` pairs behave as self-loops, so running a
//! machine never fails on an in-alphabet event. The only reward a machine
//! emits is the goal-entry indicator: 1 on the transition that enters a goal
//! state from a non-goal state, 0 everywhere else.
//!
//! Internally states and events are dense indices. The alphabet is kept
//! sorted by name, so iterating event ids in ascending order is the canonical
//! lexicographic processing order for simultaneous events.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RmError {
    #[error("unknown symbol: state `{0}`")]
    UnknownState(String),
    #[error("unknown symbol: event `{0}`")]
    UnknownEvent(String),
    #[error("invalid event name `{0}`: expected a non-empty token over [A-Za-z0-9_]")]
    BadEventName(String),
    #[error("nondeterministic: state `{state}` has two transitions on `{event}`")]
    Nondeterministic { state: String, event: String },
    #[error("goal has outgoing transition: `{state}` --{event}-->")]
    GoalHasOutgoing { state: String, event: String },
    #[error("state `{0}` is both a goal and a sink")]
    GoalIsSink(String),
    #[error("duplicate state `{0}`")]
    DuplicateState(String),
    #[error("missing {0}")]
    Missing(&'static str),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: Box<RmError>,
    },
    #[error("{0}")]
    Malformed(String),
}

pub type Result<T, E = RmError> = std::result::Result<T, E>;

/// An environment event name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event(String);

impl Event {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let ok = !name.is_empty()
            && name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_');
        if ok {
            Ok(Event(name))
        } else {
            Err(RmError::BadEventName(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Event {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Dense state index into [`RewardMachine::states`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateId(pub usize);

/// Dense event index into [`RewardMachine::alphabet`]. Ascending order is
/// lexicographic order of event names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewardMachine {
    states: Vec<String>,
    state_index: HashMap<String, usize>,
    initial: usize,
    alphabet: Vec<Event>,
    event_index: HashMap<String, usize>,
    // delta[state][event]
    delta: Vec<Vec<Option<usize>>>,
    goals: Vec<bool>,
    sinks: Vec<bool>,
}

/// Collects the pieces of a machine before validation.
#[derive(Debug, Clone, Default)]
pub struct RewardMachineBuilder {
    states: Vec<String>,
    initial: Option<String>,
    alphabet: Vec<String>,
    transitions: Vec<(String, String, String)>,
    goals: Vec<String>,
    sinks: Vec<String>,
}

impl RewardMachineBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(mut self, s: impl Into<String>) -> Self {
        self.states.push(s.into());
        self
    }

    pub fn states<I, S>(mut self, it: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.states.extend(it.into_iter().map(Into::into));
        self
    }

    pub fn initial(mut self, s: impl Into<String>) -> Self {
        self.initial = Some(s.into());
        self
    }

    pub fn event(mut self, e: impl Into<String>) -> Self {
        self.alphabet.push(e.into());
        self
    }

    pub fn events<I, S>(mut self, it: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.alphabet.extend(it.into_iter().map(Into::into));
        self
    }

    pub fn transition(
        mut self,
        from: impl Into<String>,
        event: impl Into<String>,
        to: impl Into<String>,
    ) -> Self {
        self.transitions.push((from.into(), event.into(), to.into()));
        self
    }

    pub fn goal(mut self, s: impl Into<String>) -> Self {
        self.goals.push(s.into());
        self
    }

    pub fn sink(mut self, s: impl Into<String>) -> Self {
        self.sinks.push(s.into());
        self
    }

    pub fn build(self) -> Result<RewardMachine> {
        let mut state_index = HashMap::new();
        for (i, s) in self.states.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) || s.contains('#') {
                return Err(RmError::Malformed(format!("invalid state id `{s}`")));
            }
            if state_index.insert(s.clone(), i).is_some() {
                return Err(RmError::DuplicateState(s.clone()));
            }
        }
        let lookup = |s: &str| -> Result<usize> {
            state_index
                .get(s)
                .copied()
                .ok_or_else(|| RmError::UnknownState(s.to_string()))
        };

        let initial = lookup(self.initial.as_deref().ok_or(RmError::Missing("initial state"))?)?;

        let names: BTreeSet<String> = self.alphabet.into_iter().collect();
        let alphabet = names
            .into_iter()
            .map(Event::new)
            .collect::<Result<Vec<_>>>()?;
        let event_index: HashMap<String, usize> = alphabet
            .iter()
            .enumerate()
            .map(|(i, e)| (e.0.clone(), i))
            .collect();

        let n = self.states.len();
        let mut goals = vec![false; n];
        for g in &self.goals {
            goals[lookup(g)?] = true;
        }
        let mut sinks = vec![false; n];
        for s in &self.sinks {
            let i = lookup(s)?;
            if goals[i] {
                return Err(RmError::GoalIsSink(s.clone()));
            }
            sinks[i] = true;
        }

        let mut delta = vec![vec![None; alphabet.len()]; n];
        for (from, ev, to) in &self.transitions {
            let u = lookup(from)?;
            let v = lookup(to)?;
            let e = *event_index
                .get(ev.as_str())
                .ok_or_else(|| RmError::UnknownEvent(ev.clone()))?;
            if goals[u] {
                return Err(RmError::GoalHasOutgoing {
                    state: from.clone(),
                    event: ev.clone(),
                });
            }
            match delta[u][e] {
                Some(prev) if prev != v => {
                    return Err(RmError::Nondeterministic {
                        state: from.clone(),
                        event: ev.clone(),
                    })
                }
                _ => delta[u][e] = Some(v),
            }
        }

        Ok(RewardMachine {
            states: self.states,
            state_index,
            initial,
            alphabet,
            event_index,
            delta,
            goals,
            sinks,
        })
    }
}

impl RewardMachine {
    pub fn builder() -> RewardMachineBuilder {
        RewardMachineBuilder::new()
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn alphabet(&self) -> &[Event] {
        &self.alphabet
    }

    pub fn initial(&self) -> StateId {
        StateId(self.initial)
    }

    pub fn state_name(&self, u: StateId) -> &str {
        &self.states[u.0]
    }

    pub fn event_name(&self, e: EventId) -> &str {
        self.alphabet[e.0].as_str()
    }

    pub fn state_id(&self, name: &str) -> Result<StateId> {
        self.state_index
            .get(name)
            .map(|&i| StateId(i))
            .ok_or_else(|| RmError::UnknownState(name.to_string()))
    }

    pub fn event_id(&self, name: &str) -> Result<EventId> {
        self.event_index
            .get(name)
            .map(|&i| EventId(i))
            .ok_or_else(|| RmError::UnknownEvent(name.to_string()))
    }

    pub fn has_event(&self, name: &str) -> bool {
        self.event_index.contains_key(name)
    }

    pub fn is_goal(&self, u: StateId) -> bool {
        self.goals[u.0]
    }

    pub fn is_sink(&self, u: StateId) -> bool {
        self.sinks[u.0]
    }

    pub fn goal_ids(&self) -> impl Iterator<Item = StateId> + '_ {
        self.goals
            .iter()
            .enumerate()
            .filter(|(_, &g)| g)
            .map(|(i, _)| StateId(i))
    }

    pub fn sink_ids(&self) -> impl Iterator<Item = StateId> + '_ {
        self.sinks
            .iter()
            .enumerate()
            .filter(|(_, &g)| g)
            .map(|(i, _)| StateId(i))
    }

    /// The explicitly drawn successor, if any. `None` means the completed
    /// semantics self-loops.
    pub fn defined(&self, u: StateId, e: EventId) -> Option<StateId> {
        self.delta[u.0][e.0].map(StateId)
    }

    /// Completed transition function: undefined pairs self-loop.
    pub fn next(&self, u: StateId, e: EventId) -> StateId {
        self.defined(u, e).unwrap_or(u)
    }

    /// Explicit transitions as `(from, event, to)`.
    pub fn transitions(&self) -> impl Iterator<Item = (StateId, EventId, StateId)> + '_ {
        self.delta.iter().enumerate().flat_map(|(u, row)| {
            row.iter()
                .enumerate()
                .filter_map(move |(e, v)| v.map(|v| (StateId(u), EventId(e), StateId(v))))
        })
    }

    pub fn score_ids(&self, u: StateId, u_next: StateId) -> u8 {
        u8::from(!self.is_goal(u) && self.is_goal(u_next))
    }

    /// Name-level transition. Unknown names are an error.
    pub fn step(&self, u: &str, e: &str) -> Result<&str> {
        let u = self.state_id(u)?;
        let e = self.event_id(e)?;
        Ok(self.state_name(self.next(u, e)))
    }

    /// Goal-entry indicator σ(u, u').
    pub fn score(&self, u: &str, u_next: &str) -> Result<u8> {
        Ok(self.score_ids(self.state_id(u)?, self.state_id(u_next)?))
    }

    /// Folds a set of simultaneous events in lexicographic name order.
    pub fn step_event_set<S: AsRef<str>>(&self, u: &str, events: &[S]) -> Result<&str> {
        let mut ids = events
            .iter()
            .map(|e| self.event_id(e.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        ids.sort_unstable();
        ids.dedup();
        let mut cur = self.state_id(u)?;
        for e in ids {
            cur = self.next(cur, e);
        }
        Ok(self.state_name(cur))
    }

    /// Index-level fold; `events` must be sorted ascending for canonical order.
    pub fn step_ids(&self, u: StateId, events: &[EventId]) -> StateId {
        events.iter().fold(u, |cur, &e| self.next(cur, e))
    }

    pub fn accepts<S: AsRef<str>>(&self, trace: &[Vec<S>]) -> Result<bool> {
        let mut cur = self.state_name(self.initial()).to_string();
        for set in trace {
            cur = self.step_event_set(&cur, set)?.to_string();
        }
        Ok(self.is_goal(self.state_id(&cur)?))
    }

    /// States reachable from the initial state under the completed semantics.
    pub fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.num_states()];
        let mut stack = vec![self.initial];
        seen[self.initial] = true;
        while let Some(u) = stack.pop() {
            for v in self.delta[u].iter().flatten() {
                if !seen[*v] {
                    seen[*v] = true;
                    stack.push(*v);
                }
            }
        }
        seen
    }

    /// True when some goal state is reachable from the initial state.
    pub fn goal_reachable(&self) -> bool {
        self.reachable()
            .iter()
            .zip(&self.goals)
            .any(|(&r, &g)| r && g)
    }

    pub fn to_text(&self) -> String {
        serialize_rm(self)
    }
}

/// A machine paired with its current state.
#[derive(Debug, Clone, Copy)]
pub struct RmConfiguration<'a> {
    machine: &'a RewardMachine,
    current: StateId,
}

impl<'a> RmConfiguration<'a> {
    pub fn new(machine: &'a RewardMachine) -> Self {
        Self {
            machine,
            current: machine.initial(),
        }
    }

    pub fn at(machine: &'a RewardMachine, current: StateId) -> Result<Self> {
        if current.0 >= machine.num_states() {
            return Err(RmError::UnknownState(format!("#{}", current.0)));
        }
        Ok(Self { machine, current })
    }

    pub fn machine(&self) -> &'a RewardMachine {
        self.machine
    }

    pub fn current(&self) -> StateId {
        self.current
    }

    pub fn in_goal(&self) -> bool {
        self.machine.is_goal(self.current)
    }

    pub fn in_sink(&self) -> bool {
        self.machine.is_sink(self.current)
    }

    /// Applies one event and returns the emitted score.
    pub fn apply(&mut self, e: EventId) -> u8 {
        let next = self.machine.next(self.current, e);
        let r = self.machine.score_ids(self.current, next);
        self.current = next;
        r
    }
}

pub fn parse_rm(text: &str) -> Result<RewardMachine> {
    let mut b = RewardMachineBuilder::new();
    let mut seen = BTreeSet::new();
    let mut trans_lines = Vec::new();
    let mut goal_line = 0;
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let wrap = |e: RmError| RmError::Parse {
            line: line_no,
            source: Box::new(e),
        };
        let (key, rest) = line
            .split_once(':')
            .ok_or_else(|| wrap(RmError::Malformed(format!("expected `key: values`, got `{line}`"))))?;
        let key = key.trim();
        let toks: Vec<&str> = rest.split_whitespace().collect();
        if key != "trans" && !seen.insert(key.to_string()) {
            return Err(wrap(RmError::Malformed(format!("duplicate section `{key}`"))));
        }
        match key {
            "states" => b = b.states(toks),
            "initial" => match toks.as_slice() {
                [s] => b = b.initial(*s),
                _ => return Err(wrap(RmError::Malformed("initial takes exactly one state".into()))),
            },
            "goals" => {
                goal_line = line_no;
                for t in toks {
                    b = b.goal(t);
                }
            }
            "sinks" => {
                for t in toks {
                    b = b.sink(t);
                }
            }
            "alphabet" => b = b.events(toks),
            "trans" => match toks.as_slice() {
                [u, e, v] => {
                    trans_lines.push(line_no);
                    b = b.transition(*u, *e, *v);
                }
                _ => {
                    return Err(wrap(RmError::Malformed(
                        "trans takes `from event to`".into(),
                    )))
                }
            },
            other => return Err(wrap(RmError::Malformed(format!("unknown section `{other}`")))),
        }
    }
    // Re-run validation to attach line numbers to structural errors.
    let transitions = b.transitions.clone();
    b.build().map_err(|e| {
        let line = match &e {
            RmError::Nondeterministic { state, event } | RmError::GoalHasOutgoing { state, event } => {
                transitions
                    .iter()
                    .zip(&trans_lines)
                    .filter(|((u, ev, _), _)| u == state && ev == event)
                    .map(|(_, &l)| l)
                    .next_back()
                    .unwrap_or(0)
            }
            RmError::GoalIsSink(_) => goal_line,
            _ => 0,
        };
        RmError::Parse {
            line,
            source: Box::new(e),
        }
    })
}

pub fn serialize_rm(rm: &RewardMachine) -> String {
    let mut out = String::new();
    out.push_str(&format!("states: {}\n", rm.states.join(" ")));
    out.push_str(&format!("initial: {}\n", rm.state_name(rm.initial())));
    let goals: Vec<&str> = rm.goal_ids().map(|u| rm.state_name(u)).collect();
    out.push_str(&format!("goals: {}\n", goals.join(" ")));
    let sinks: Vec<&str> = rm.sink_ids().map(|u| rm.state_name(u)).collect();
    if !sinks.is_empty() {
        out.push_str(&format!("sinks: {}\n", sinks.join(" ")));
    }
    let events: Vec<&str> = rm.alphabet.iter().map(Event::as_str).collect();
    out.push_str(&format!("alphabet: {}\n", events.join(" ")));
    for (u, e, v) in rm.transitions() {
        out.push_str(&format!(
            "trans: {} {} {}\n",
            rm.state_name(u),
            rm.event_name(e),
            rm.state_name(v)
        ));
    }
    out
}
