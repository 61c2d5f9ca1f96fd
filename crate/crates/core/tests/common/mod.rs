#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use rmdecomp::decomp::{Decomposition, LocalEventSet};
use rmdecomp::rm::{RewardMachine, StateId};

pub const EVENTS: [&str; 4] = ["a", "b", "c", "d"];

/// Random task machine: 2..=6 states, 1..=4 events, the last state a goal
/// and, sometimes, the one before it a sink. Goals and sinks have no
/// outgoing transitions.
pub fn random_rm(seed: u64) -> RewardMachine {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=6);
    let m = rng.gen_range(1..=4);
    let goal = n - 1;
    let sink = (n >= 3 && rng.gen_bool(0.3)).then_some(n - 2);
    let mut b = RewardMachine::builder()
        .states((0..n).map(|i| format!("q{i}")))
        .initial("q0")
        .events(EVENTS[..m].iter().copied())
        .goal(format!("q{goal}"));
    if let Some(s) = sink {
        b = b.sink(format!("q{s}"));
    }
    for u in 0..n {
        if u == goal || Some(u) == sink {
            continue;
        }
        for e in &EVENTS[..m] {
            if rng.gen_bool(0.55) {
                let v = rng.gen_range(0..n);
                if v != u {
                    b = b.transition(format!("q{u}"), *e, format!("q{v}"));
                }
            }
        }
    }
    b.build().expect("generator emits well-formed machines")
}

/// Every way of handing each event to agent 0, agent 1 or both.
pub fn two_agent_assignments(rm: &RewardMachine) -> Vec<[Vec<String>; 2]> {
    let events: Vec<String> = rm.alphabet().iter().map(|e| e.as_str().to_string()).collect();
    let total = 3usize.pow(events.len() as u32);
    (0..total)
        .map(|mut code| {
            let mut sets = [Vec::new(), Vec::new()];
            for e in &events {
                match code % 3 {
                    0 => sets[0].push(e.clone()),
                    1 => sets[1].push(e.clone()),
                    _ => {
                        sets[0].push(e.clone());
                        sets[1].push(e.clone());
                    }
                }
                code /= 3;
            }
            sets
        })
        .collect()
}

pub fn les(sets: &[Vec<String>]) -> Vec<LocalEventSet> {
    sets.iter()
        .enumerate()
        .map(|(i, s)| LocalEventSet::new(i, s.iter().cloned()).unwrap())
        .collect()
}

/// Explores every single-event string of length at most `max_len`, running
/// the task and the synchronized team of sub-machines side by side. Returns
/// false at the first reachable configuration where their acceptance
/// differs.
pub fn brute_force_equivalent(rm: &RewardMachine, d: &Decomposition, max_len: usize) -> bool {
    let subs: Vec<&RewardMachine> = d.subtasks.iter().map(|s| &s.machine).collect();
    let start = (rm.initial(), subs.iter().map(|m| m.initial()).collect::<Vec<_>>());
    let mut layer: BTreeSet<(StateId, Vec<StateId>)> = BTreeSet::from([start]);
    let mut seen: HashSet<(StateId, Vec<StateId>)> = HashSet::new();
    for depth in 0..=max_len {
        let mut next_layer = BTreeSet::new();
        for (u, team) in &layer {
            let task_done = rm.is_goal(*u);
            let team_done = team.iter().zip(&subs).all(|(s, m)| m.is_goal(*s));
            if task_done != team_done {
                return false;
            }
            if depth == max_len || !seen.insert((*u, team.clone())) {
                continue;
            }
            for e in rm.alphabet() {
                let name = e.as_str();
                let eid = rm.event_id(name).unwrap();
                let u2 = rm.defined(*u, eid).unwrap_or(*u);
                let mut team2 = team.clone();
                let mut ready = true;
                for (i, m) in subs.iter().enumerate() {
                    if let Ok(le) = m.event_id(name) {
                        match m.defined(team[i], le) {
                            Some(v) => team2[i] = v,
                            None => ready = false,
                        }
                    }
                }
                if !ready {
                    team2 = team.clone();
                }
                next_layer.insert((u2, team2));
            }
        }
        layer = next_layer;
    }
    true
}
