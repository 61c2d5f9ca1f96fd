//! Local event sets, projection, synchronized parallel composition,
//! bisimilarity and top-k generation of valid decompositions.
//!
//! A decomposition assigns every agent a local event set and the projection
//! of the team machine onto it. It is valid when the synchronized product of
//! the projections is bisimilar to the team machine, i.e. a trace completes
//! every sub-task exactly when it completes the whole task.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

use crate::rm::{parse_rm, Event, EventId, RewardMachine, RmError, StateId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecompError {
    #[error("LES induces nondeterministic projection: class `{class}` on `{event}`")]
    NondeterministicProjection { class: String, event: String },
    #[error("LES projection yields goal class `{class}` with outgoing transition on `{event}`")]
    GoalClassOutgoing { class: String, event: String },
    #[error("event `{0}` is not in the task alphabet")]
    UnknownEvent(String),
    #[error("agent {agent}: events {events:?} are both required and forbidden")]
    InconsistentConstraints { agent: usize, events: Vec<String> },
    #[error("invalid constraints: {0}")]
    BadConstraints(String),
    #[error("no valid decomposition")]
    NoValidDecomposition,
    #[error("{count} candidate assignments exceed the search cap of {cap}")]
    TooManyAssignments { count: u128, cap: u64 },
    #[error(transparent)]
    Rm(#[from] RmError),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T, E = DecompError> = std::result::Result<T, E>;

/// Events visible to one agent (0-based agent index).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LocalEventSet {
    pub agent: usize,
    pub events: BTreeSet<Event>,
}

impl LocalEventSet {
    pub fn new<I, S>(agent: usize, events: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let events = events
            .into_iter()
            .map(|e| Event::new(e.as_ref()))
            .collect::<Result<_, _>>()?;
        Ok(Self { agent, events })
    }

    pub fn contains(&self, e: &str) -> bool {
        self.events.iter().any(|x| x.as_str() == e)
    }

    pub fn encode(&self) -> String {
        self.events
            .iter()
            .map(Event::as_str)
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// A projected machine plus the original states each of its states stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct SubTaskRm {
    pub machine: RewardMachine,
    /// Indexed by sub-machine state id.
    pub origin_classes: Vec<BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub id: usize,
    pub les: Vec<LocalEventSet>,
    pub subtasks: Vec<SubTaskRm>,
    pub score: f64,
}

impl Decomposition {
    pub fn n_agents(&self) -> usize {
        self.les.len()
    }

    pub fn encode(&self) -> String {
        self.les
            .iter()
            .map(LocalEventSet::encode)
            .collect::<Vec<_>>()
            .join("|")
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.les.iter().map(|l| l.events.len()).collect()
    }

    /// Projects `rm` onto the given sets and scores the result.
    pub fn from_les(
        rm: &RewardMachine,
        id: usize,
        les: Vec<LocalEventSet>,
        w_size: f64,
        w_balance: f64,
    ) -> Result<Self> {
        let subtasks = les
            .iter()
            .map(|l| project(rm, l))
            .collect::<Result<Vec<_>>>()?;
        let sizes: Vec<usize> = les.iter().map(|l| l.events.len()).collect();
        Ok(Self {
            id,
            les,
            subtasks,
            score: score_sizes(&sizes, w_size, w_balance),
        })
    }

    /// Every agent is handed the whole task.
    pub fn monolithic(rm: &RewardMachine, n: usize, w_size: f64, w_balance: f64) -> Self {
        let les: Vec<LocalEventSet> = (0..n)
            .map(|agent| LocalEventSet {
                agent,
                events: rm.alphabet().iter().cloned().collect(),
            })
            .collect();
        let sub = SubTaskRm {
            machine: rm.clone(),
            origin_classes: rm
                .states()
                .iter()
                .map(|s| BTreeSet::from([s.clone()]))
                .collect(),
        };
        let sizes = vec![rm.alphabet().len(); n];
        Self {
            id: 0,
            les,
            subtasks: vec![sub; n],
            score: score_sizes(&sizes, w_size, w_balance),
        }
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

fn class_name(members: &BTreeSet<String>, order: &[String]) -> String {
    if members.len() == 1 {
        return members.iter().next().cloned().unwrap_or_default();
    }
    // keep the original machine's state order inside the name
    let inner: Vec<&str> = order
        .iter()
        .filter(|s| members.contains(*s))
        .map(String::as_str)
        .collect();
    format!("{{{}}}", inner.join(","))
}

/// Quotient of `rm` by the equivalence generated by transitions on events
/// outside `les`.
///
/// Transitions into sink states on events outside `les` are not merged; the
/// agent cannot witness them, and merging would fold every state that can
/// fail into the sink. Classes unreachable from the initial class are
/// dropped.
pub fn project(rm: &RewardMachine, les: &LocalEventSet) -> Result<SubTaskRm> {
    let mut local = vec![false; rm.alphabet().len()];
    for e in &les.events {
        let id = rm
            .event_id(e.as_str())
            .map_err(|_| DecompError::UnknownEvent(e.to_string()))?;
        local[id.0] = true;
    }

    let n = rm.num_states();
    let mut uf = UnionFind::new(n);
    for (u, e, v) in rm.transitions() {
        if !local[e.0] && !rm.is_sink(v) {
            uf.union(u.0, v.0);
        }
    }

    // classes ordered by their smallest member index
    let mut class_of = vec![usize::MAX; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut root_class: HashMap<usize, usize> = HashMap::new();
    for u in 0..n {
        let r = uf.find(u);
        let c = *root_class.entry(r).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        class_of[u] = c;
        members[c].push(u);
    }

    let origin_classes: Vec<BTreeSet<String>> = members
        .iter()
        .map(|m| m.iter().map(|&u| rm.states()[u].clone()).collect())
        .collect();
    let names: Vec<String> = origin_classes
        .iter()
        .map(|m| class_name(m, rm.states()))
        .collect();
    let is_goal: Vec<bool> = members
        .iter()
        .map(|m| m.iter().any(|&u| rm.is_goal(StateId(u))))
        .collect();
    let is_sink: Vec<bool> = members
        .iter()
        .map(|m| m.iter().all(|&u| rm.is_sink(StateId(u))))
        .collect();

    let mut edges: BTreeMap<(usize, EventId), usize> = BTreeMap::new();
    for (u, e, v) in rm.transitions() {
        if !local[e.0] {
            continue;
        }
        let (cu, cv) = (class_of[u.0], class_of[v.0]);
        if cu == cv {
            continue;
        }
        match edges.get(&(cu, e)) {
            Some(&prev) if prev != cv => {
                return Err(DecompError::NondeterministicProjection {
                    class: names[cu].clone(),
                    event: rm.event_name(e).to_string(),
                })
            }
            _ => {
                edges.insert((cu, e), cv);
            }
        }
    }

    let init = class_of[rm.initial().0];
    let mut keep = vec![false; members.len()];
    keep[init] = true;
    let mut stack = vec![init];
    while let Some(c) = stack.pop() {
        for (_, &cv) in edges.range((c, EventId(0))..=(c, EventId(usize::MAX))) {
            if !keep[cv] {
                keep[cv] = true;
                stack.push(cv);
            }
        }
    }
    edges.retain(|&(cu, _), _| keep[cu]);

    let mut b = RewardMachine::builder()
        .states(names.iter().zip(&keep).filter(|(_, &k)| k).map(|(n, _)| n.clone()))
        .initial(names[init].clone())
        .events(les.events.iter().map(|e| e.as_str().to_string()));
    for (c, name) in names.iter().enumerate() {
        if !keep[c] {
            continue;
        }
        if is_goal[c] {
            b = b.goal(name.clone());
        } else if is_sink[c] {
            b = b.sink(name.clone());
        }
    }
    for (&(cu, e), &cv) in &edges {
        if is_goal[cu] {
            return Err(DecompError::GoalClassOutgoing {
                class: names[cu].clone(),
                event: rm.event_name(e).to_string(),
            });
        }
        b = b.transition(names[cu].clone(), rm.event_name(e), names[cv].clone());
    }
    Ok(SubTaskRm {
        machine: b.build()?,
        origin_classes: origin_classes
            .into_iter()
            .zip(keep)
            .filter_map(|(c, k)| k.then_some(c))
            .collect(),
    })
}

/// Adds a fresh sink reached on every task event that no agent observes.
/// Sink entry carries no reward.
pub fn make_accident_avoidance(
    sub: &SubTaskRm,
    task: &RewardMachine,
    all_les: &[LocalEventSet],
) -> SubTaskRm {
    let covered: BTreeSet<&str> = all_les
        .iter()
        .flat_map(|l| l.events.iter().map(Event::as_str))
        .collect();
    let uncovered: Vec<&str> = task
        .alphabet()
        .iter()
        .map(Event::as_str)
        .filter(|e| !covered.contains(e))
        .collect();
    if uncovered.is_empty() {
        return sub.clone();
    }

    let m = &sub.machine;
    let mut sink = String::from("sink");
    let mut i = 0;
    while m.state_id(&sink).is_ok() {
        sink = format!("sink_{i}");
        i += 1;
    }

    let mut b = RewardMachine::builder()
        .states(m.states().iter().cloned())
        .state(sink.clone())
        .initial(m.state_name(m.initial()))
        .events(m.alphabet().iter().map(|e| e.as_str().to_string()))
        .events(uncovered.iter().map(|e| e.to_string()))
        .sink(sink.clone());
    for g in m.goal_ids() {
        b = b.goal(m.state_name(g));
    }
    for s in m.sink_ids() {
        b = b.sink(m.state_name(s));
    }
    for (u, e, v) in m.transitions() {
        b = b.transition(m.state_name(u), m.event_name(e), m.state_name(v));
    }
    for u in 0..m.num_states() {
        let u = StateId(u);
        if m.is_goal(u) || m.is_sink(u) {
            continue;
        }
        for e in &uncovered {
            b = b.transition(m.state_name(u), *e, sink.clone());
        }
    }
    let mut origin_classes = sub.origin_classes.clone();
    origin_classes.push(BTreeSet::new());
    SubTaskRm {
        machine: b.build().expect("augmenting a valid machine stays valid"),
        origin_classes,
    }
}

/// Synchronized product over the tuples reachable from the initial tuple.
///
/// On an event, every machine whose alphabet has it must have an explicit
/// transition from its current state; then all of them move together,
/// otherwise none do.
pub fn parallel_compose(machines: &[&RewardMachine]) -> RewardMachine {
    assert!(!machines.is_empty(), "composition needs at least one machine");
    let alphabet: BTreeSet<&str> = machines
        .iter()
        .flat_map(|m| m.alphabet().iter().map(Event::as_str))
        .collect();
    let alphabet: Vec<&str> = alphabet.into_iter().collect();
    // local[event][machine]
    let local: Vec<Vec<Option<EventId>>> = alphabet
        .iter()
        .map(|e| machines.iter().map(|m| m.event_id(e).ok()).collect())
        .collect();

    let start: Vec<StateId> = machines.iter().map(|m| m.initial()).collect();
    let mut index: HashMap<Vec<StateId>, usize> = HashMap::from([(start.clone(), 0)]);
    let mut tuples = vec![start];
    let mut edges = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    while let Some(t) = queue.pop_front() {
        let cur = tuples[t].clone();
        for (ei, ids) in local.iter().enumerate() {
            let mut next = cur.clone();
            let mut ready = true;
            for (mi, id) in ids.iter().enumerate() {
                if let Some(e) = id {
                    match machines[mi].defined(cur[mi], *e) {
                        Some(v) => next[mi] = v,
                        None => {
                            ready = false;
                            break;
                        }
                    }
                }
            }
            if !ready || next == cur {
                continue;
            }
            let target = match index.get(&next) {
                Some(&i) => i,
                None => {
                    tuples.push(next.clone());
                    index.insert(next, tuples.len() - 1);
                    queue.push_back(tuples.len() - 1);
                    tuples.len() - 1
                }
            };
            edges.push((t, ei, target));
        }
    }

    let name = |tuple: &[StateId]| -> String {
        let parts: Vec<&str> = tuple
            .iter()
            .zip(machines)
            .map(|(u, m)| m.state_name(*u))
            .collect();
        format!("({})", parts.join(";"))
    };
    let names: Vec<String> = tuples.iter().map(|t| name(t)).collect();
    let mut b = RewardMachine::builder()
        .states(names.iter().cloned())
        .initial(names[0].clone())
        .events(alphabet.iter().map(|e| e.to_string()));
    for (t, tuple) in tuples.iter().enumerate() {
        if tuple.iter().zip(machines).all(|(u, m)| m.is_goal(*u)) {
            b = b.goal(names[t].clone());
        } else if tuple.iter().zip(machines).any(|(u, m)| m.is_sink(*u)) {
            b = b.sink(names[t].clone());
        }
    }
    for (t, ei, target) in edges {
        b = b.transition(names[t].clone(), alphabet[ei], names[target].clone());
    }
    b.build()
        .expect("product of deterministic machines is deterministic")
}

/// Bisimilarity of the self-loop-completed, goal-labelled systems over the
/// union of both alphabets. Both systems are deterministic, so a
/// synchronized walk over reachable pairs suffices.
pub fn bisimilar(a: &RewardMachine, b: &RewardMachine) -> bool {
    let alphabet: BTreeSet<&str> = a
        .alphabet()
        .iter()
        .chain(b.alphabet())
        .map(Event::as_str)
        .collect();
    let ids: Vec<(Option<EventId>, Option<EventId>)> = alphabet
        .iter()
        .map(|e| (a.event_id(e).ok(), b.event_id(e).ok()))
        .collect();
    let step = |m: &RewardMachine, u: StateId, e: Option<EventId>| match e {
        Some(e) => m.next(u, e),
        None => u,
    };

    let start = (a.initial(), b.initial());
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some((u, v)) = queue.pop_front() {
        if a.is_goal(u) != b.is_goal(v) {
            return false;
        }
        for &(ea, eb) in &ids {
            let next = (step(a, u, ea), step(b, v, eb));
            if seen.insert(next) {
                queue.push_back(next);
            }
        }
    }
    true
}

pub fn is_valid(rm: &RewardMachine, d: &Decomposition) -> bool {
    let machines: Vec<&RewardMachine> = d.subtasks.iter().map(|s| &s.machine).collect();
    bisimilar(&parallel_compose(&machines), rm)
}

/// `w_size * -mean + w_balance * -stdev` over local event set sizes, using
/// the population standard deviation. Higher is better.
pub fn score_sizes(sizes: &[usize], w_size: f64, w_balance: f64) -> f64 {
    if sizes.is_empty() {
        return 0.0;
    }
    let n = sizes.len() as f64;
    let mean = sizes.iter().sum::<usize>() as f64 / n;
    let var = sizes
        .iter()
        .map(|&s| (s as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    w_size * -mean + w_balance * -var.sqrt()
}

pub fn score_decomposition(d: &Decomposition, w_size: f64, w_balance: f64) -> f64 {
    score_sizes(&d.sizes(), w_size, w_balance)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConstraints {
    pub forbidden: Vec<BTreeSet<Event>>,
    pub required: Vec<BTreeSet<Event>>,
    pub k: usize,
    pub w_size: f64,
    pub w_balance: f64,
    /// Upper bound on enumerated event-to-agent assignments.
    pub max_assignments: u64,
    /// Reject decompositions that leave some agent without events.
    pub nonempty: bool,
}

pub const DEFAULT_W_SIZE: f64 = 2.0;
pub const DEFAULT_W_BALANCE: f64 = 0.5;
pub const DEFAULT_MAX_ASSIGNMENTS: u64 = 1_000_000;

impl GenerationConstraints {
    pub fn unconstrained(n: usize, k: usize) -> Self {
        Self {
            forbidden: vec![BTreeSet::new(); n],
            required: vec![BTreeSet::new(); n],
            k,
            w_size: DEFAULT_W_SIZE,
            w_balance: DEFAULT_W_BALANCE,
            max_assignments: DEFAULT_MAX_ASSIGNMENTS,
            nonempty: false,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.forbidden.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(DecompError::BadConstraints("k must be at least 1".into()));
        }
        if self.forbidden.len() != self.required.len() {
            return Err(DecompError::BadConstraints(
                "forbidden and required lists cover different agent counts".into(),
            ));
        }
        for (agent, (f, r)) in self.forbidden.iter().zip(&self.required).enumerate() {
            let both: Vec<String> = f.intersection(r).map(|e| e.to_string()).collect();
            if !both.is_empty() {
                return Err(DecompError::InconsistentConstraints {
                    agent: agent + 1,
                    events: both,
                });
            }
        }
        Ok(())
    }

    /// Parses a constraints file. Agents are numbered from 1; `*` applies a
    /// line to every agent.
    ///
    /// ```text
    /// agents: 3
    /// k: 10
    /// forbidden 1: A2HQ nA2HQ
    /// required *: Signal
    /// ```
    pub fn parse(text: &str, default_agents: Option<usize>) -> Result<Self> {
        let mut agents = default_agents;
        let mut k = 10;
        let mut w_size = DEFAULT_W_SIZE;
        let mut w_balance = DEFAULT_W_BALANCE;
        let mut max_assignments = DEFAULT_MAX_ASSIGNMENTS;
        let mut nonempty = false;
        let mut rules: Vec<(usize, bool, Option<usize>, Vec<String>)> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line_no = ln + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| DecompError::Parse { line: line_no, msg };
            let (key, rest) = line
                .split_once(':')
                .ok_or_else(|| err(format!("expected `key: values`, got `{line}`")))?;
            let mut kt = key.split_whitespace();
            let head = kt.next().unwrap_or("");
            let num = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| err(format!("bad number `{}`", s.trim())))
            };
            match head {
                "agents" => agents = Some(num(rest)? as usize),
                "k" => k = num(rest)? as usize,
                "w_size" => w_size = num(rest)?,
                "w_balance" => w_balance = num(rest)?,
                "max_assignments" => max_assignments = num(rest)? as u64,
                "nonempty" => {
                    nonempty = match rest.trim() {
                        "true" | "yes" | "1" => true,
                        "false" | "no" | "0" => false,
                        other => return Err(err(format!("bad boolean `{other}`"))),
                    }
                }
                "forbidden" | "required" => {
                    let who = kt
                        .next()
                        .ok_or_else(|| err(format!("`{head}` needs an agent number or `*`")))?;
                    let agent = if who == "*" {
                        None
                    } else {
                        let a: usize = who
                            .parse()
                            .map_err(|_| err(format!("bad agent `{who}`")))?;
                        if a == 0 {
                            return Err(err("agents are numbered from 1".into()));
                        }
                        Some(a - 1)
                    };
                    let events = rest.split_whitespace().map(str::to_string).collect();
                    rules.push((line_no, head == "forbidden", agent, events));
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let n = agents.ok_or(DecompError::BadConstraints(
            "agent count unknown: add `agents: N`".into(),
        ))?;
        let mut c = Self::unconstrained(n, k);
        c.w_size = w_size;
        c.w_balance = w_balance;
        c.max_assignments = max_assignments;
        c.nonempty = nonempty;
        for (line, forbidden, agent, events) in rules {
            let targets: Vec<usize> = match agent {
                Some(a) if a >= n => {
                    return Err(DecompError::Parse {
                        line,
                        msg: format!("agent {} out of range 1..={n}", a + 1),
                    })
                }
                Some(a) => vec![a],
                None => (0..n).collect(),
            };
            for a in targets {
                for e in &events {
                    let e = Event::new(e.as_str()).map_err(|err| DecompError::Parse {
                        line,
                        msg: err.to_string(),
                    })?;
                    if forbidden {
                        c.forbidden[a].insert(e);
                    } else {
                        c.required[a].insert(e);
                    }
                }
            }
        }
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "agents: {}\nk: {}\nw_size: {}\nw_balance: {}\n",
            self.n_agents(),
            self.k,
            self.w_size,
            self.w_balance
        );
        if self.max_assignments != DEFAULT_MAX_ASSIGNMENTS {
            let _ = writeln!(out, "max_assignments: {}", self.max_assignments);
        }
        if self.nonempty {
            out.push_str("nonempty: true\n");
        }
        for (i, (f, r)) in self.forbidden.iter().zip(&self.required).enumerate() {
            let join = |s: &BTreeSet<Event>| {
                s.iter().map(Event::as_str).collect::<Vec<_>>().join(" ")
            };
            if !f.is_empty() {
                let _ = writeln!(out, "forbidden {}: {}", i + 1, join(f));
            }
            if !r.is_empty() {
                let _ = writeln!(out, "required {}: {}", i + 1, join(r));
            }
        }
        out
    }
}

fn les_from_mask(rm: &RewardMachine, agent: usize, mask: u64) -> LocalEventSet {
    LocalEventSet {
        agent,
        events: rm
            .alphabet()
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, e)| e.clone())
            .collect(),
    }
}

/// All valid decompositions honoring `constraints`, best first, truncated to
/// `constraints.k`. Every event goes to a non-empty set of agents.
pub fn enumerate_candidates(
    rm: &RewardMachine,
    n: usize,
    constraints: &GenerationConstraints,
) -> Result<Vec<Decomposition>> {
    constraints.validate()?;
    if constraints.n_agents() != n {
        return Err(DecompError::BadConstraints(format!(
            "constraints describe {} agents, expected {n}",
            constraints.n_agents()
        )));
    }
    if n == 0 || n > 16 {
        return Err(DecompError::BadConstraints(format!("unsupported agent count {n}")));
    }
    let sigma = rm.alphabet().len();
    if sigma > 64 {
        return Err(DecompError::BadConstraints("alphabet larger than 64 events".into()));
    }
    for set in constraints.forbidden.iter().chain(&constraints.required) {
        if let Some(e) = set.iter().find(|e| !rm.has_event(e.as_str())) {
            return Err(DecompError::UnknownEvent(e.to_string()));
        }
    }

    // admissible agent masks per event
    let mut options: Vec<Vec<u32>> = Vec::with_capacity(sigma);
    for e in rm.alphabet() {
        let opts: Vec<u32> = (1u32..(1 << n))
            .filter(|mask| {
                (0..n).all(|a| {
                    let has = mask & (1 << a) != 0;
                    (!constraints.required[a].contains(e) || has)
                        && (!constraints.forbidden[a].contains(e) || !has)
                })
            })
            .collect();
        options.push(opts);
    }
    let count = options
        .iter()
        .try_fold(1u128, |acc, o| acc.checked_mul(o.len() as u128))
        .unwrap_or(u128::MAX);
    if count > constraints.max_assignments as u128 {
        return Err(DecompError::TooManyAssignments {
            count,
            cap: constraints.max_assignments,
        });
    }
    if count == 0 {
        return Err(DecompError::NoValidDecomposition);
    }

    // projections depend only on the event mask
    let mut cache: HashMap<u64, Option<SubTaskRm>> = HashMap::new();
    let mut found: Vec<(f64, String, Vec<u64>)> = Vec::new();
    let mut digits = vec![0usize; sigma];
    'outer: loop {
        let mut masks = vec![0u64; n];
        for (ei, &d) in digits.iter().enumerate() {
            let m = options[ei][d];
            for (a, mask) in masks.iter_mut().enumerate() {
                if m & (1 << a) != 0 {
                    *mask |= 1 << ei;
                }
            }
        }

        let mut subs = Vec::with_capacity(n);
        let mut ok = !(constraints.nonempty && masks.contains(&0));
        for &mask in &masks {
            if !ok {
                break;
            }
            let entry = cache.entry(mask).or_insert_with(|| {
                project(rm, &les_from_mask(rm, 0, mask)).ok()
            });
            match entry {
                Some(s) => subs.push(s.machine.clone()),
                None => ok = false,
            }
        }
        if ok {
            let refs: Vec<&RewardMachine> = subs.iter().collect();
            if bisimilar(&parallel_compose(&refs), rm) {
                let sizes: Vec<usize> = masks.iter().map(|m| m.count_ones() as usize).collect();
                let score = score_sizes(&sizes, constraints.w_size, constraints.w_balance);
                let key = masks
                    .iter()
                    .enumerate()
                    .map(|(a, &m)| les_from_mask(rm, a, m).encode())
                    .collect::<Vec<_>>()
                    .join("|");
                found.push((score, key, masks));
            }
        }

        // next assignment, last event varying fastest
        let mut i = sigma;
        loop {
            if i == 0 {
                break 'outer;
            }
            i -= 1;
            digits[i] += 1;
            if digits[i] < options[i].len() {
                break;
            }
            digits[i] = 0;
        }
        if sigma == 0 {
            break;
        }
    }

    if found.is_empty() {
        return Err(DecompError::NoValidDecomposition);
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    found.truncate(constraints.k);
    Ok(found
        .into_iter()
        .enumerate()
        .map(|(id, (score, _, masks))| {
            let les: Vec<LocalEventSet> = masks
                .iter()
                .enumerate()
                .map(|(a, &m)| les_from_mask(rm, a, m))
                .collect();
            let subtasks = masks
                .iter()
                .map(|m| cache[m].clone().expect("cached projection"))
                .collect();
            Decomposition {
                id,
                les,
                subtasks,
                score,
            }
        })
        .collect())
}

/// Exhaustively compares acceptance of `rm` against the synchronized run of
/// `subs` on every single-event string up to `max_len`. Returns the first
/// counterexample found.
pub fn trace_counterexample(
    rm: &RewardMachine,
    subs: &[&RewardMachine],
    max_len: usize,
) -> Option<Vec<String>> {
    let events: Vec<&str> = rm.alphabet().iter().map(Event::as_str).collect();
    let mut path = Vec::new();
    let start_subs: Vec<StateId> = subs.iter().map(|m| m.initial()).collect();
    // configurations already explored with at least this much budget left
    let mut best: HashMap<(StateId, Vec<StateId>), usize> = HashMap::new();
    fn rec(
        rm: &RewardMachine,
        subs: &[&RewardMachine],
        events: &[&str],
        u: StateId,
        cur: Vec<StateId>,
        budget: usize,
        path: &mut Vec<String>,
        best: &mut HashMap<(StateId, Vec<StateId>), usize>,
    ) -> bool {
        let all = cur.iter().zip(subs).all(|(s, m)| m.is_goal(*s));
        if rm.is_goal(u) != all {
            return true;
        }
        match best.get(&(u, cur.clone())) {
            Some(&b) if b >= budget => return false,
            _ => {
                best.insert((u, cur.clone()), budget);
            }
        }
        if budget == 0 {
            return false;
        }
        for e in events {
            let nu = rm.next(u, rm.event_id(e).expect("own alphabet"));
            let mut next = cur.clone();
            let mut ready = true;
            for (i, m) in subs.iter().enumerate() {
                if let Ok(id) = m.event_id(e) {
                    match m.defined(cur[i], id) {
                        Some(v) => next[i] = v,
                        None => ready = false,
                    }
                }
            }
            if !ready {
                next = cur.clone();
            }
            path.push(e.to_string());
            if rec(rm, subs, events, nu, next, budget - 1, path, best) {
                return true;
            }
            path.pop();
        }
        false
    }
    if rec(
        rm,
        subs,
        &events,
        rm.initial(),
        start_subs,
        max_len,
        &mut path,
        &mut best,
    ) {
        Some(path)
    } else {
        None
    }
}

pub fn write_decompositions(ds: &[Decomposition]) -> String {
    let mut out = String::new();
    for d in ds {
        let _ = writeln!(out, "[candidate {}]", d.id);
        let _ = writeln!(out, "score: {}", d.score);
        for (l, s) in d.les.iter().zip(&d.subtasks) {
            let _ = writeln!(out, "[agent {}]", l.agent + 1);
            let evs: Vec<&str> = l.events.iter().map(Event::as_str).collect();
            let _ = writeln!(out, "les: {}", evs.join(" "));
            for (u, class) in s.origin_classes.iter().enumerate() {
                let members: Vec<&str> = class.iter().map(String::as_str).collect();
                let _ = writeln!(
                    out,
                    "class {}: {}",
                    s.machine.state_name(StateId(u)),
                    members.join(" ")
                );
            }
            out.push_str(&s.machine.to_text());
        }
        out.push_str("[end]\n");
    }
    out
}

pub fn parse_decompositions(text: &str) -> Result<Vec<Decomposition>> {
    let mut out = Vec::new();
    let mut cur: Option<Decomposition> = None;
    let mut agent: Option<(usize, LocalEventSet, Vec<(String, BTreeSet<String>)>, String)> = None;

    fn finish_agent(
        d: &mut Decomposition,
        a: Option<(usize, LocalEventSet, Vec<(String, BTreeSet<String>)>, String)>,
        line: usize,
    ) -> Result<()> {
        let Some((start, les, classes, rm_text)) = a else {
            return Ok(());
        };
        let machine = parse_rm(&rm_text).map_err(|e| DecompError::Parse {
            line: start,
            msg: e.to_string(),
        })?;
        let mut origin = vec![BTreeSet::new(); machine.num_states()];
        for (name, members) in classes {
            let id = machine.state_id(&name).map_err(|e| DecompError::Parse {
                line,
                msg: e.to_string(),
            })?;
            origin[id.0] = members;
        }
        d.les.push(les);
        d.subtasks.push(SubTaskRm {
            machine,
            origin_classes: origin,
        });
        Ok(())
    }

    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DecompError::Parse { line: line_no, msg };
        if let Some(rest) = line.strip_prefix("[candidate ").and_then(|r| r.strip_suffix(']')) {
            if cur.is_some() {
                return Err(err("missing [end] before new candidate".into()));
            }
            let id = rest.trim().parse().map_err(|_| err(format!("bad id `{rest}`")))?;
            cur = Some(Decomposition {
                id,
                les: Vec::new(),
                subtasks: Vec::new(),
                score: 0.0,
            });
            continue;
        }
        let d = cur.as_mut().ok_or_else(|| err("content outside a candidate".into()))?;
        if line == "[end]" {
            finish_agent(d, agent.take(), line_no)?;
            out.push(cur.take().expect("checked above"));
        } else if let Some(rest) = line.strip_prefix("[agent ").and_then(|r| r.strip_suffix(']')) {
            finish_agent(d, agent.take(), line_no)?;
            let a: usize = rest.trim().parse().map_err(|_| err(format!("bad agent `{rest}`")))?;
            if a == 0 {
                return Err(err("agents are numbered from 1".into()));
            }
            agent = Some((
                line_no,
                LocalEventSet {
                    agent: a - 1,
                    events: BTreeSet::new(),
                },
                Vec::new(),
                String::new(),
            ));
        } else if let Some(rest) = line.strip_prefix("score:") {
            d.score = rest
                .trim()
                .parse()
                .map_err(|_| err(format!("bad score `{}`", rest.trim())))?;
        } else if let Some((_, les, classes, rm_text)) = agent.as_mut() {
            if let Some(rest) = line.strip_prefix("les:") {
                les.events = rest
                    .split_whitespace()
                    .map(Event::new)
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(e.to_string()))?;
            } else if let Some(rest) = line.strip_prefix("class ") {
                let (name, members) = rest
                    .split_once(':')
                    .ok_or_else(|| err("class line needs `:`".into()))?;
                classes.push((
                    name.trim().to_string(),
                    members.split_whitespace().map(str::to_string).collect(),
                ));
            } else {
                rm_text.push_str(line);
                rm_text.push('\n');
            }
        } else {
            return Err(err(format!("unexpected line `{line}`")));
        }
    }
    if cur.is_some() {
        return Err(DecompError::Parse {
            line: text.lines().count(),
            msg: "unterminated candidate".into(),
        });
    }
    Ok(out)
}
