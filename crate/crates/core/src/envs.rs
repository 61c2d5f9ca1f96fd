//! Grid Markov games with labelling functions.
//!
//! Three event vocabularies are supported: Repairs (HQ meeting, stations and
//! a capacity-limited hazard), Four-Buttons and Cooperative Buttons (buttons
//! that unlock coloured regions). Layouts live in map files; see
//! [`GridSpec::parse`] for the format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rm::Event;

pub type SimRng = ChaCha8Rng;

/// `(row, col)`, row 0 at the top.
pub type Cell = (usize, usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("map line {line}: {msg}")]
    Map { line: usize, msg: String },
    #[error("invalid grid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    NoOp,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::NoOp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Self::ALL[i]
    }

    fn apply(self, (r, c): Cell) -> Option<Cell> {
        match self {
            Action::Up => r.checked_sub(1).map(|r| (r, c)),
            Action::Down => Some((r + 1, c)),
            Action::Left => c.checked_sub(1).map(|c| (r, c)),
            Action::Right => Some((r, c + 1)),
            Action::NoOp => Some((r, c)),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
            Action::NoOp => "noop",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Yellow,
    Green,
    Blue,
    Red,
}

impl Color {
    pub fn bit(self) -> u8 {
        1 << (self as u8)
    }

    fn letter(self) -> char {
        match self {
            Color::Yellow => 'Y',
            Color::Green => 'G',
            Color::Blue => 'B',
            Color::Red => 'R',
        }
    }

    fn from_letter(c: char) -> Option<Color> {
        match c.to_ascii_uppercase() {
            'Y' => Some(Color::Yellow),
            'G' => Some(Color::Green),
            'B' => Some(Color::Blue),
            'R' => Some(Color::Red),
            _ => None,
        }
    }

    /// Button event name, e.g. `Y_B`.
    pub fn button_event(self) -> String {
        format!("{}_B", self.letter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvKind {
    Repairs,
    FourButtons,
    CoopButtons,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Repairs => "repairs",
            EnvKind::FourButtons => "four_buttons",
            EnvKind::CoopButtons => "coop_buttons",
        }
    }

    pub fn from_name(s: &str) -> Option<EnvKind> {
        match s {
            "repairs" => Some(EnvKind::Repairs),
            "four_buttons" | "four-buttons" => Some(EnvKind::FourButtons),
            "coop_buttons" | "coop-buttons" | "cooperative_buttons" => Some(EnvKind::CoopButtons),
            _ => None,
        }
    }
}

pub const HQ: &str = "HQ";
pub const YELLOW_STATION: &str = "Y_S";
pub const RED_STATION: &str = "R_S";

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub kind: EnvKind,
    pub width: usize,
    pub height: usize,
    pub walls: BTreeSet<Cell>,
    pub agents: Vec<Cell>,
    pub buttons: BTreeMap<Color, Cell>,
    /// Occupants needed to press a button; absent means 1.
    pub quorum: BTreeMap<Color, usize>,
    pub regions: BTreeMap<Color, BTreeSet<Cell>>,
    pub hazard: BTreeSet<Cell>,
    pub hazard_capacity: usize,
    pub stations: BTreeMap<String, Cell>,
    pub goal_cell: Option<Cell>,
    pub slip_prob: f64,
    pub max_steps: usize,
    pub gamma: f64,
}

impl GridSpec {
    pub fn inside(&self, (r, c): Cell) -> bool {
        r < self.height && c < self.width
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::Invalid(msg));
        if self.agents.is_empty() {
            return bad("no agents".into());
        }
        if self.hazard_capacity == 0 {
            return bad("hazard capacity must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.slip_prob) {
            return bad(format!("slip_prob {} outside [0, 1]", self.slip_prob));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        let check = |what: String, cell: Cell| -> Result<(), EnvError> {
            if !self.inside(cell) {
                return Err(EnvError::Invalid(format!("{what} at {cell:?} is off the grid")));
            }
            if self.walls.contains(&cell) {
                return Err(EnvError::Invalid(format!("{what} at {cell:?} is inside a wall")));
            }
            Ok(())
        };
        for (i, &a) in self.agents.iter().enumerate() {
            check(format!("agent {} start", i + 1), a)?;
        }
        for (c, &b) in &self.buttons {
            check(format!("{c:?} button"), b)?;
        }
        for (name, &s) in &self.stations {
            check(format!("station {name}"), s)?;
        }
        if let Some(g) = self.goal_cell {
            check("goal".into(), g)?;
        }
        let in_hazard = self.agents.iter().filter(|a| self.hazard.contains(a)).count();
        if in_hazard > self.hazard_capacity {
            return bad("more agents start in the hazard than it holds".into());
        }
        Ok(())
    }

    /// Parses a map file.
    ///
    /// A key-value header is followed by `grid:` and the rows. Legend:
    /// `#` wall, `.` floor, `~` hazard floor, `1`-`9` agent starts,
    /// `Y G B R` buttons, `y g b r` coloured regions, `H` HQ,
    /// `S`/`T` yellow/red station, `s`/`t` yellow/red station inside the
    /// hazard, `*` goal cell.
    pub fn parse(text: &str) -> Result<GridSpec, EnvError> {
        let mut kind = None;
        let mut slip_prob = 0.05;
        let mut hazard_capacity = 1;
        let mut max_steps = 100;
        let mut gamma = 0.95;
        let mut quorum = BTreeMap::new();
        let mut rows: Vec<(usize, &str)> = Vec::new();
        let mut in_grid = false;
        for (ln, raw) in text.lines().enumerate() {
            let line_no = ln + 1;
            let err = |msg: String| EnvError::Map { line: line_no, msg };
            if in_grid {
                let row = raw.trim_end();
                if !row.is_empty() {
                    rows.push((line_no, row));
                }
                continue;
            }
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line == "grid:" {
                in_grid = true;
                continue;
            }
            let (key, val) = line
                .split_once(':')
                .ok_or_else(|| err(format!("expected `key: value`, got `{line}`")))?;
            let val = val.trim();
            let num = |v: &str| v.parse::<f64>().map_err(|_| err(format!("bad number `{v}`")));
            match key.split_whitespace().collect::<Vec<_>>().as_slice() {
                ["env"] => {
                    kind = Some(
                        EnvKind::from_name(val).ok_or_else(|| err(format!("unknown env `{val}`")))?,
                    )
                }
                ["slip_prob"] => slip_prob = num(val)?,
                ["hazard_capacity"] => hazard_capacity = num(val)? as usize,
                ["max_steps"] => max_steps = num(val)? as usize,
                ["gamma"] => gamma = num(val)?,
                ["quorum", c] => {
                    let color = c
                        .chars()
                        .next()
                        .and_then(Color::from_letter)
                        .ok_or_else(|| err(format!("unknown colour `{c}`")))?;
                    quorum.insert(color, num(val)? as usize);
                }
                _ => return Err(err(format!("unknown key `{}`", key.trim()))),
            }
        }
        let kind = kind.ok_or(EnvError::Map {
            line: 0,
            msg: "missing `env:`".into(),
        })?;
        if rows.is_empty() {
            return Err(EnvError::Map {
                line: 0,
                msg: "missing grid rows".into(),
            });
        }
        let width = rows[0].1.chars().count();
        let mut spec = GridSpec {
            kind,
            width,
            height: rows.len(),
            walls: BTreeSet::new(),
            agents: Vec::new(),
            buttons: BTreeMap::new(),
            quorum,
            regions: BTreeMap::new(),
            hazard: BTreeSet::new(),
            hazard_capacity,
            stations: BTreeMap::new(),
            goal_cell: None,
            slip_prob,
            max_steps,
            gamma,
        };
        let mut starts: BTreeMap<u32, Cell> = BTreeMap::new();
        for (r, (line_no, row)) in rows.iter().enumerate() {
            let err = |msg: String| EnvError::Map { line: *line_no, msg };
            if row.chars().count() != width {
                return Err(err(format!("row width {} differs from {width}", row.chars().count())));
            }
            for (c, ch) in row.chars().enumerate() {
                let cell = (r, c);
                let station = |name: &str, hazard: bool, spec: &mut GridSpec| -> Result<(), EnvError> {
                    if spec.stations.insert(name.to_string(), cell).is_some() {
                        return Err(err(format!("duplicate station {name}")));
                    }
                    if hazard {
                        spec.hazard.insert(cell);
                    }
                    Ok(())
                };
                match ch {
                    '#' => {
                        spec.walls.insert(cell);
                    }
                    '.' => {}
                    '~' => {
                        spec.hazard.insert(cell);
                    }
                    '*' => {
                        if spec.goal_cell.replace(cell).is_some() {
                            return Err(err("duplicate goal".into()));
                        }
                    }
                    'H' => station(HQ, false, &mut spec)?,
                    'S' => station(YELLOW_STATION, false, &mut spec)?,
                    'T' => station(RED_STATION, false, &mut spec)?,
                    's' => station(YELLOW_STATION, true, &mut spec)?,
                    't' => station(RED_STATION, true, &mut spec)?,
                    '1'..='9' => {
                        let d = ch.to_digit(10).expect("digit");
                        if starts.insert(d, cell).is_some() {
                            return Err(err(format!("duplicate start for agent {d}")));
                        }
                    }
                    'Y' | 'G' | 'B' | 'R' => {
                        let color = Color::from_letter(ch).expect("button letter");
                        if spec.buttons.insert(color, cell).is_some() {
                            return Err(err(format!("duplicate {color:?} button")));
                        }
                    }
                    'y' | 'g' | 'b' | 'r' => {
                        let color = Color::from_letter(ch).expect("region letter");
                        spec.regions.entry(color).or_default().insert(cell);
                    }
                    other => return Err(err(format!("unknown glyph `{other}`"))),
                }
            }
        }
        for (expect, (&d, &cell)) in (1u32..).zip(&starts) {
            if d != expect {
                return Err(EnvError::Map {
                    line: 0,
                    msg: format!("agent starts must be numbered 1..n, missing {expect}"),
                });
            }
            spec.agents.push(cell);
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct JointState {
    pub positions: Vec<Cell>,
    /// Bit set over [`Color`].
    pub pressed: u8,
    pub step_count: usize,
}

impl JointState {
    pub fn is_pressed(&self, c: Color) -> bool {
        self.pressed & c.bit() != 0
    }
}

/// Agent-local observation: its own cell.
pub type Observation = (u16, u16);

/// Interface the training loop needs from an environment.
pub trait MarkovGame {
    type State: Clone;

    fn n_agents(&self) -> usize;
    fn max_steps(&self) -> usize;
    /// Event names, sorted; label ids index into this.
    fn vocabulary(&self) -> &[Event];
    fn reset(&self, rng: &mut SimRng) -> Self::State;
    fn step(
        &self,
        s: &Self::State,
        actions: &[Action],
        rng: &mut SimRng,
    ) -> Result<Self::State, EnvError>;
    /// Ids of the events true in `s`, ascending.
    fn label(&self, prev: &Self::State, s: &Self::State) -> Vec<usize>;
    fn observe(&self, s: &Self::State, agent: usize) -> Observation;
}

#[derive(Debug, Clone)]
pub struct GridGame {
    spec: GridSpec,
    vocab: Vec<Event>,
    region_of: BTreeMap<Cell, Color>,
}

fn ev(name: String) -> Event {
    Event::new(name).expect("built-in event names are valid")
}

impl GridGame {
    pub fn new(spec: GridSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        let n = spec.agents.len();
        let mut names: BTreeSet<String> = BTreeSet::new();
        match spec.kind {
            EnvKind::Repairs => {
                for i in 1..=n {
                    names.insert(format!("A{i}HQ"));
                    names.insert(format!("nA{i}HQ"));
                }
                names.insert("Signal".into());
                names.insert(YELLOW_STATION.into());
                names.insert(RED_STATION.into());
            }
            EnvKind::FourButtons | EnvKind::CoopButtons => {
                for c in spec.buttons.keys() {
                    names.insert(c.button_event());
                }
                if spec.goal_cell.is_some() {
                    names.insert("Goal".into());
                }
                if spec.kind == EnvKind::CoopButtons && spec.buttons.contains_key(&Color::Red) {
                    for i in 2..=n {
                        names.insert(format!("A{i}_RB"));
                        names.insert(format!("A{i}_nRB"));
                    }
                }
            }
        }
        let region_of = spec
            .regions
            .iter()
            .flat_map(|(&c, cells)| cells.iter().map(move |&cell| (cell, c)))
            .collect();
        Ok(Self {
            vocab: names.into_iter().map(ev).collect(),
            spec,
            region_of,
        })
    }

    pub fn parse(text: &str) -> Result<Self, EnvError> {
        Self::new(GridSpec::parse(text)?)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    fn event_id(&self, name: &str) -> usize {
        self.vocab
            .binary_search_by(|e| e.as_str().cmp(name))
            .expect("event in vocabulary")
    }

    fn blocked(&self, target: Cell, pressed: u8) -> bool {
        if !self.spec.inside(target) || self.spec.walls.contains(&target) {
            return true;
        }
        matches!(self.region_of.get(&target), Some(c) if pressed & c.bit() == 0)
    }

    /// Step that also reports the actions actually executed after slipping.
    pub fn step_detailed(
        &self,
        s: &JointState,
        actions: &[Action],
        rng: &mut SimRng,
    ) -> Result<(JointState, Vec<Action>), EnvError> {
        let n = self.spec.agents.len();
        if actions.len() != n {
            return Err(EnvError::ActionCount {
                expected: n,
                got: actions.len(),
            });
        }
        let mut positions = s.positions.clone();
        let mut realized = Vec::with_capacity(n);
        for (i, &intended) in actions.iter().enumerate() {
            let slipped = rng.gen::<f64>() < self.spec.slip_prob;
            let a = if slipped {
                Action::from_index(rng.gen_range(0..Action::ALL.len()))
            } else {
                intended
            };
            realized.push(a);
            let Some(target) = a.apply(positions[i]) else {
                continue;
            };
            if target == positions[i] || self.blocked(target, s.pressed) {
                continue;
            }
            let h = &self.spec.hazard;
            if h.contains(&target) && !h.contains(&positions[i]) {
                // agents are resolved in index order, so earlier movers count
                let occupied = positions.iter().filter(|p| h.contains(p)).count();
                if occupied >= self.spec.hazard_capacity {
                    continue;
                }
            }
            positions[i] = target;
        }
        let mut pressed = s.pressed;
        for (&c, &cell) in &self.spec.buttons {
            let need = self.spec.quorum.get(&c).copied().unwrap_or(1);
            if positions.iter().filter(|&&p| p == cell).count() >= need {
                pressed |= c.bit();
            }
        }
        Ok((
            JointState {
                positions,
                pressed,
                step_count: s.step_count + 1,
            },
            realized,
        ))
    }

    pub fn label_names(&self, prev: &JointState, s: &JointState) -> BTreeSet<String> {
        self.label(prev, s)
            .into_iter()
            .map(|i| self.vocab[i].to_string())
            .collect()
    }

    fn at(&self, s: &JointState, cell: Cell) -> usize {
        s.positions.iter().filter(|&&p| p == cell).count()
    }
}

impl MarkovGame for GridGame {
    type State = JointState;

    fn n_agents(&self) -> usize {
        self.spec.agents.len()
    }

    fn max_steps(&self) -> usize {
        self.spec.max_steps
    }

    fn vocabulary(&self) -> &[Event] {
        &self.vocab
    }

    fn reset(&self, _rng: &mut SimRng) -> JointState {
        JointState {
            positions: self.spec.agents.clone(),
            pressed: 0,
            step_count: 0,
        }
    }

    fn step(&self, s: &JointState, actions: &[Action], rng: &mut SimRng) -> Result<JointState, EnvError> {
        self.step_detailed(s, actions, rng).map(|(s, _)| s)
    }

    fn label(&self, _prev: &JointState, s: &JointState) -> Vec<usize> {
        let mut out = Vec::new();
        match self.spec.kind {
            EnvKind::Repairs => {
                let hq = self.spec.stations.get(HQ).copied();
                let mut at_hq = 0;
                for (i, &p) in s.positions.iter().enumerate() {
                    let here = Some(p) == hq;
                    at_hq += usize::from(here);
                    let name = if here {
                        format!("A{}HQ", i + 1)
                    } else {
                        format!("nA{}HQ", i + 1)
                    };
                    out.push(self.event_id(&name));
                }
                if at_hq >= 2 {
                    out.push(self.event_id("Signal"));
                }
                for st in [YELLOW_STATION, RED_STATION] {
                    if let Some(&cell) = self.spec.stations.get(st) {
                        if self.at(s, cell) > 0 {
                            out.push(self.event_id(st));
                        }
                    }
                }
            }
            EnvKind::FourButtons | EnvKind::CoopButtons => {
                for (&c, &cell) in &self.spec.buttons {
                    let need = self.spec.quorum.get(&c).copied().unwrap_or(1);
                    if self.at(s, cell) >= need {
                        out.push(self.event_id(&c.button_event()));
                    }
                }
                if let Some(g) = self.spec.goal_cell {
                    if self.at(s, g) > 0 {
                        out.push(self.event_id("Goal"));
                    }
                }
                if self.spec.kind == EnvKind::CoopButtons {
                    if let Some(&red) = self.spec.buttons.get(&Color::Red) {
                        for (i, &p) in s.positions.iter().enumerate().skip(1) {
                            let name = if p == red {
                                format!("A{}_RB", i + 1)
                            } else {
                                format!("A{}_nRB", i + 1)
                            };
                            out.push(self.event_id(&name));
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn observe(&self, s: &JointState, agent: usize) -> Observation {
        let (r, c) = s.positions[agent];
        (r as u16, c as u16)
    }
}
