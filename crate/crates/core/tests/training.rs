mod common;

use std::collections::{HashMap, VecDeque};

use rand::SeedableRng;

use rmdecomp::builtin;
use rmdecomp::decomp::{enumerate_candidates, Decomposition, GenerationConstraints, LocalEventSet};
use rmdecomp::envs::{Action, Cell, EnvKind, GridGame, MarkovGame, SimRng};
use rmdecomp::harness::{self, ExperimentConfig};
use rmdecomp::rm::{parse_rm, RewardMachine};
use rmdecomp::training::{
    run_episode, train, vocabulary_map, ActiveDecomposition, EpisodeOptions, Learner, Mode, QKey,
    RewardShaping, TaskConditionedPolicy, TrainParams,
};

fn key(obs: (u16, u16)) -> QKey {
    QKey {
        obs,
        decomposition: 0,
        sub_state: 0,
        overall_state: None,
    }
}

#[test]
fn two_state_chain_converges_to_value_iteration() {
    // A --act--> B (reward 0), B --act--> end (reward 1); other actions stay put
    let gamma = 0.9;
    let (a, b) = (key((0, 0)), key((0, 1)));
    let mut p = TaskConditionedPolicy::new(0.0, 0.5, gamma).unwrap();
    for _ in 0..200 {
        p.update(&a, Action::Right, 0.0, &b, false).unwrap();
        p.update(&b, Action::Right, 1.0, &b, true).unwrap();
    }

    let mut v = [0.0f64; 2];
    for _ in 0..200 {
        v = [gamma * v[1], 1.0];
    }
    assert!((p.row(&a)[Action::Right.index()] - v[0]).abs() < 1e-3);
    assert!((p.row(&b)[Action::Right.index()] - v[1]).abs() < 1e-3);
    assert!((v[0] - 0.9).abs() < 1e-12);
}

/// Always steps along a shortest path to `target`.
struct Scripted {
    next: HashMap<Cell, Action>,
}

impl Scripted {
    fn toward(game: &GridGame, target: Cell) -> (Self, HashMap<Cell, usize>) {
        let spec = game.spec();
        let mut dist = HashMap::from([(target, 0usize)]);
        let mut next = HashMap::new();
        let mut queue = VecDeque::from([target]);
        while let Some(cell) = queue.pop_front() {
            let (r, c) = cell;
            // neighbours and the move that takes them into `cell`
            let cands = [
                (r.wrapping_add(1), c, Action::Up),
                (r.wrapping_sub(1), c, Action::Down),
                (r, c.wrapping_add(1), Action::Left),
                (r, c.wrapping_sub(1), Action::Right),
            ];
            for (nr, nc, a) in cands {
                let n = (nr, nc);
                if !spec.inside(n) || spec.walls.contains(&n) || dist.contains_key(&n) {
                    continue;
                }
                dist.insert(n, dist[&cell] + 1);
                next.insert(n, a);
                queue.push_back(n);
            }
        }
        (Self { next }, dist)
    }
}

impl Learner for Scripted {
    fn act(&self, key: &QKey, _explore: bool, _rng: &mut SimRng) -> Action {
        let cell = (key.obs.0 as usize, key.obs.1 as usize);
        self.next.get(&cell).copied().unwrap_or(Action::NoOp)
    }

    fn update(&mut self, _: &QKey, _: Action, _: f64, _: &QKey, _: bool) -> rmdecomp::training::Result<()> {
        Ok(())
    }
}

#[test]
fn scripted_corridor_reward_is_discounted_distance() {
    let map = "env: four_buttons\nslip_prob: 0\nmax_steps: 50\ngamma: 0.9\ngrid:\n.1.#....\n...#.##.\n.......Y\n";
    let game = GridGame::parse(map).unwrap();
    let task = parse_rm("states: u0 u1\ninitial: u0\ngoals: u1\nalphabet: Y_B\ntrans: u0 Y_B u1\n").unwrap();
    let d = Decomposition::from_les(&task, 0, vec![LocalEventSet::new(0, ["Y_B"]).unwrap()], 2.0, 0.5).unwrap();
    let active = ActiveDecomposition::new(&task, &d);
    let target = game.spec().buttons.values().next().copied().unwrap();
    let (mut learner, dist) = Scripted::toward(&game, target);
    let start = game.spec().agents[0];
    let t_star = dist[&start];
    let manhattan = start.0.abs_diff(target.0) + start.1.abs_diff(target.1);
    assert_eq!(t_star, manhattan);

    let opts = EpisodeOptions {
        max_steps: 50,
        gamma: 0.9,
        condition_on_overall: true,
        learn: false,
        shuffle_events: false,
    };
    let mut rng = SimRng::seed_from_u64(0);
    let vocab = vocabulary_map(&game, &task);
    let res = run_episode(&game, &task, &vocab, &active, &mut learner, &RewardShaping::default(), &opts, &mut rng, None).unwrap();
    assert_eq!(res.completion_step, Some(t_star));
    assert!((res.sub_rewards[0] - 0.9f64.powi(t_star as i32)).abs() < 1e-12);
}

#[test]
fn full_exploration_is_uniform() {
    let p = TaskConditionedPolicy::new(1.0, 0.1, 0.9).unwrap();
    let mut rng = SimRng::seed_from_u64(17);
    let mut counts = [0usize; 5];
    let draws = 10_000;
    for _ in 0..draws {
        counts[p.act(&key((0, 0)), true, &mut rng).index()] += 1;
    }
    let expected = draws as f64 / 5.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99th percentile of chi-squared with 4 degrees of freedom
    assert!(chi2 < 13.277, "chi2 {chi2} counts {counts:?}");
}

#[test]
fn monolithic_rewards_identical_in_csv() {
    // a small room, so that random walks finish the task now and then
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("small.map");
    std::fs::write(&map, "env: four_buttons\nslip_prob: 0.05\nmax_steps: 60\ngamma: 0.97\ngrid:\nY..G\n.12.\nR..B\n").unwrap();
    let cfg = ExperimentConfig {
        env: EnvKind::FourButtons,
        map: Some(map),
        mode: Mode::Monolithic,
        episodes: 300,
        seeds: vec![2],
        ..ExperimentConfig::default()
    };
    let exp = harness::Experiment::prepare(&cfg).unwrap();
    let log = exp.train_seed(2).unwrap();
    let csv = log.csv();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let r0 = header.iter().position(|&c| c == "reward_0").unwrap();
    assert_eq!(header[r0 + 1], "reward_1");
    let mut nonzero = 0;
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[r0], cols[r0 + 1], "{line}");
        nonzero += usize::from(cols[r0] != "0.000000");
    }
    assert!(nonzero > 0, "no episode completed; the check would be vacuous");
}

fn shipped(kind: EnvKind) -> (GridGame, RewardMachine, GenerationConstraints) {
    let (m, r, c) = match kind {
        EnvKind::FourButtons => (builtin::FOUR_BUTTONS_MAP, builtin::FOUR_BUTTONS_RM, builtin::FOUR_BUTTONS_CONSTRAINTS),
        EnvKind::CoopButtons => (builtin::COOP_BUTTONS_MAP, builtin::COOP_BUTTONS_RM, builtin::COOP_BUTTONS_CONSTRAINTS),
        EnvKind::Repairs => (builtin::REPAIRS_MAP, builtin::REPAIRS_RM, builtin::REPAIRS_CONSTRAINTS),
    };
    let g = GridGame::parse(m).unwrap();
    let n = g.n_agents();
    (g, parse_rm(r).unwrap(), GenerationConstraints::parse(c, Some(n)).unwrap())
}

#[test]
fn finished_sub_tasks_imply_finished_team_task() {
    for kind in [EnvKind::FourButtons, EnvKind::CoopButtons, EnvKind::Repairs] {
        let (game, rm, cons) = shipped(kind);
        let p = TrainParams {
            episodes: 1500,
            seed: 4,
            gamma: game.spec().gamma,
            max_steps: game.spec().max_steps,
            ..TrainParams::default()
        };
        // a violation inside an episode is a hard error from train
        let log = train(&game, &rm, &cons, &p).unwrap();
        for e in &log.episodes {
            if e.sub_rewards.iter().all(|&r| r > 0.0) {
                assert!(e.completed, "{kind:?} episode {}", e.episode);
            }
            for &r in &e.sub_rewards {
                let ok = r == 0.0 || (0..=p.max_steps).any(|t| (p.gamma.powi(t as i32) - r).abs() < 1e-12);
                assert!(ok, "reward {r} is not a power of gamma");
            }
        }
    }
}

#[test]
fn four_buttons_candidates_match_traces_up_to_length_eight() {
    let (_, rm, cons) = shipped(EnvKind::FourButtons);
    let ds = enumerate_candidates(&rm, 2, &cons).unwrap();
    assert_eq!(ds.len(), 10);
    for d in &ds {
        assert!(common::brute_force_equivalent(&rm, d, 8), "{}", d.encode());
    }
    // yellow and green alone for one agent
    let d = Decomposition::from_les(
        &rm,
        0,
        vec![
            LocalEventSet::new(0, ["G_B", "Y_B"]).unwrap(),
            LocalEventSet::new(1, ["B_B", "R_B", "Y_B"]).unwrap(),
        ],
        2.0,
        0.5,
    )
    .unwrap();
    assert!(common::brute_force_equivalent(&rm, &d, 8));
    assert!(rmdecomp::decomp::is_valid(&rm, &d));
}

#[test]
fn shuffled_event_order_stays_reproducible() {
    let (game, rm, cons) = shipped(EnvKind::CoopButtons);
    let p = TrainParams {
        episodes: 300,
        seed: 1,
        shuffle_events: true,
        gamma: game.spec().gamma,
        max_steps: game.spec().max_steps,
        ..TrainParams::default()
    };
    let a = train(&game, &rm, &cons, &p).unwrap().csv();
    let b = train(&game, &rm, &cons, &p).unwrap().csv();
    assert_eq!(a, b);
}

#[test]
fn indicator_mode_feeds_zero_one_values() {
    let (game, rm, cons) = shipped(EnvKind::FourButtons);
    let p = TrainParams {
        episodes: 400,
        seed: 0,
        indicator_rewards: true,
        gamma: game.spec().gamma,
        max_steps: game.spec().max_steps,
        ..TrainParams::default()
    };
    let log = train(&game, &rm, &cons, &p).unwrap();
    // with 0/1 values, score * visits * agents is a whole number
    let last = log.episodes.last().unwrap();
    for (j, (&s, &n)) in last.scores.iter().zip(&last.visits).enumerate() {
        let total = s * n as f64 * log.candidates[j].n_agents() as f64;
        assert!((total - total.round()).abs() < 1e-3, "arm {j}: {total}");
    }
}
