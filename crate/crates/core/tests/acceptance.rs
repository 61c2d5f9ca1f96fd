//! Acceptance suite. Runs as a plain binary and prints one PASS/FAIL line
//! per criterion; exits non-zero if any fails.

mod common;

use std::path::Path;
use std::thread;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rmdecomp::builtin;
use rmdecomp::decomp::{
    enumerate_candidates, is_valid, Decomposition, GenerationConstraints, DEFAULT_W_BALANCE,
    DEFAULT_W_SIZE,
};
use rmdecomp::envs::{EnvKind, GridGame, MarkovGame};
use rmdecomp::harness::{self, rolling_mean, ExperimentConfig};
use rmdecomp::rm::{parse_rm, RewardMachine};
use rmdecomp::selection::{update_value, SelectorState, ValueEstimate};
use rmdecomp::training::{
    sync_step, train, ActiveDecomposition, Mode, TeamTaskState, TrainParams, TrainingLog,
};

const C1_CORPUS: u64 = 250;
const C1_MAX_SECONDS: u64 = 120;
const C3_SEQUENCES: usize = 10_000;
const C3_REL_TOL: f64 = 1e-12;
const C4_SEEDS: u64 = 20;
const C4_EPISODES: usize = 2000;
const C4_TAIL: usize = 400;
const C4_MIN_BEST_SHARE: f64 = 0.8;
const C4_MAX_SECONDS: u64 = 10;
const C5_EPISODES: usize = 30_000;
const C5_TAIL: usize = 1000;
const C5_MIN_GAP: f64 = 0.3;
const C5_THRESHOLD: f64 = 0.9;
const C5_WINDOW: usize = 100;
const C5_MIN_FASTER: usize = 4;
const C5_MAX_SECONDS: u64 = 15 * 60;
const C6_EPISODES: usize = 20_000;
const C6_TAIL: usize = 1000;
const C6_MIN_GAP: f64 = 0.3;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn task(name: &str) -> (GridGame, RewardMachine, GenerationConstraints) {
    let (m, r, c) = match name {
        "four_buttons" => (builtin::FOUR_BUTTONS_MAP, builtin::FOUR_BUTTONS_RM, builtin::FOUR_BUTTONS_CONSTRAINTS),
        "coop_buttons" => (builtin::COOP_BUTTONS_MAP, builtin::COOP_BUTTONS_RM, builtin::COOP_BUTTONS_CONSTRAINTS),
        _ => (builtin::REPAIRS_MAP, builtin::REPAIRS_RM, builtin::REPAIRS_CONSTRAINTS),
    };
    let game = GridGame::parse(m).unwrap();
    let rm = parse_rm(r).unwrap();
    let cons = GenerationConstraints::parse(c, Some(game.n_agents())).unwrap();
    (game, rm, cons)
}

fn tail_rate(log: &TrainingLog, tail: usize) -> f64 {
    let c = log.completions();
    let t = &c[c.len() - tail..];
    t.iter().filter(|&&x| x).count() as f64 / t.len() as f64
}

fn first_reach(log: &TrainingLog, threshold: f64, window: usize) -> Option<usize> {
    rolling_mean(&log.completions(), window)
        .iter()
        .enumerate()
        .skip(window - 1)
        .find(|(_, &r)| r >= threshold)
        .map(|(i, _)| i + 1)
}

fn train_seeds_parallel(
    game: &GridGame,
    rm: &RewardMachine,
    cons: &GenerationConstraints,
    params: &[TrainParams],
) -> Vec<TrainingLog> {
    thread::scope(|s| {
        let handles: Vec<_> = params
            .iter()
            .map(|p| s.spawn(move || train(game, rm, cons, p).unwrap()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (mut checked, mut agree, mut rejected, mut valid) = (0usize, 0usize, 0usize, 0usize);
    let mut disagreements = Vec::new();
    for seed in 0..C1_CORPUS {
        let rm = common::random_rm(seed);
        for sets in common::two_agent_assignments(&rm) {
            let d = match Decomposition::from_les(&rm, 0, common::les(&sets), DEFAULT_W_SIZE, DEFAULT_W_BALANCE) {
                Ok(d) => d,
                Err(_) => {
                    rejected += 1;
                    continue;
                }
            };
            checked += 1;
            let fast = is_valid(&rm, &d);
            let slow = common::brute_force_equivalent(&rm, &d, 2 * rm.num_states());
            valid += usize::from(fast);
            if fast == slow {
                agree += 1;
            } else if disagreements.len() < 3 {
                disagreements.push(format!("seed {seed} {}: is_valid={fast} brute={slow}", d.encode()));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = agree == checked && checked > 0 && secs < C1_MAX_SECONDS as f64;
    outcome(
        pass,
        format!(
            "{C1_CORPUS} machines, {checked} decompositions compared ({valid} valid), {agree} agree, {rejected} rejected at projection, {secs:.1}s {}",
            disagreements.join("; ")
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["four_buttons", "coop_buttons", "repairs"] {
        let (_, rm, cons) = task(name);
        let ds = match enumerate_candidates(&rm, cons.n_agents(), &cons) {
            Ok(ds) => ds,
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: {e}"));
                continue;
            }
        };
        let n_valid = ds.iter().filter(|d| is_valid(&rm, d)).count();
        pass &= n_valid == ds.len() && !ds.is_empty();
        if name == "four_buttons" {
            pass &= ds.len() == 10;
        }
        parts.push(format!("{name}: {n_valid}/{} valid", ds.len()));
    }
    outcome(pass, parts.join(", "))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for alpha in [0.5, 0.9, 1.0] {
        for _ in 0..C3_SEQUENCES {
            let len = rng.gen_range(0..200);
            let rewards: Vec<f64> = (0..len).map(|_| rng.gen::<f64>()).collect();
            let rec = rewards
                .iter()
                .fold(ValueEstimate::default(), |v, &r| update_value(v, r, alpha))
                .value;
            let h = rewards.len();
            let closed: f64 = rewards
                .iter()
                .enumerate()
                .map(|(i, r)| alpha.powi((h - 1 - i) as i32) * r)
                .sum();
            let err = if closed == 0.0 {
                rec.abs()
            } else {
                ((rec - closed) / closed).abs()
            };
            worst = worst.max(err);
        }
    }
    outcome(worst <= C3_REL_TOL, format!("worst relative error {worst:.2e} over 3x{C3_SEQUENCES} sequences"))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let p = [0.1, 0.2, 0.3, 0.4, 0.8];
    let mut shares: Vec<f64> = (0..C4_SEEDS)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = SelectorState::new(&[1; 5], 1.0, 0.5).unwrap();
            let mut best = 0;
            for ep in 0..C4_EPISODES {
                let j = s.select();
                let r = f64::from(u8::from(rng.gen_bool(p[j])));
                s.record_episode(j, &[r]).unwrap();
                if ep >= C4_EPISODES - C4_TAIL && j == 4 {
                    best += 1;
                }
            }
            best as f64 / C4_TAIL as f64
        })
        .collect();
    shares.sort_by(f64::total_cmp);
    let median = (shares[9] + shares[10]) / 2.0;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        median >= C4_MIN_BEST_SHARE && secs < C4_MAX_SECONDS as f64,
        format!("median best-arm share {median:.3} over {C4_SEEDS} seeds, {secs:.2}s"),
    )
}

fn four_buttons_params(mode: Mode, seed: u64, game: &GridGame) -> TrainParams {
    TrainParams {
        mode,
        episodes: C5_EPISODES,
        seed,
        gamma: game.spec().gamma,
        max_steps: game.spec().max_steps,
        ..TrainParams::default()
    }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let (game, rm, cons) = task("four_buttons");
    let mut params: Vec<TrainParams> = SEEDS.iter().map(|&s| four_buttons_params(Mode::Lotad, s, &game)).collect();
    params.extend(SEEDS.iter().map(|&s| four_buttons_params(Mode::Monolithic, s, &game)));
    let logs = train_seeds_parallel(&game, &rm, &cons, &params);
    let (lotad, mono) = logs.split_at(SEEDS.len());
    let mean = |ls: &[TrainingLog]| ls.iter().map(|l| tail_rate(l, C5_TAIL)).sum::<f64>() / ls.len() as f64;
    let (lt, mt) = (mean(lotad), mean(mono));
    let mut faster = 0;
    let mut reach = Vec::new();
    for (l, m) in lotad.iter().zip(mono) {
        let (a, b) = (first_reach(l, C5_THRESHOLD, C5_WINDOW), first_reach(m, C5_THRESHOLD, C5_WINDOW));
        if match (a, b) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        } {
            faster += 1;
        }
        reach.push(format!("{a:?}/{b:?}"));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        lt - mt >= C5_MIN_GAP && faster >= C5_MIN_FASTER && secs < C5_MAX_SECONDS as f64,
        format!(
            "tail completion lotad {lt:.3} monolithic {mt:.3}; lotad faster on {faster}/5 (episodes to {C5_THRESHOLD}: {}); {secs:.0}s",
            reach.join(" ")
        ),
    )
}

fn criterion_6() -> Outcome {
    let (game, rm, cons) = task("repairs");
    let params = |seed: u64, cond: bool, c: f64| {
        let mut p = TrainParams {
            episodes: C6_EPISODES,
            seed,
            gamma: game.spec().gamma,
            max_steps: game.spec().max_steps,
            condition_on_overall: cond,
            ..TrainParams::default()
        };
        p.shaping.overall_bonus = c;
        p
    };
    let mut ps: Vec<TrainParams> = SEEDS.iter().map(|&s| params(s, true, 0.1)).collect();
    ps.extend(SEEDS.iter().map(|&s| params(s, false, 0.0)));
    let logs = train_seeds_parallel(&game, &rm, &cons, &ps);
    let (with, without) = logs.split_at(SEEDS.len());
    let mean = |ls: &[TrainingLog]| ls.iter().map(|l| tail_rate(l, C6_TAIL)).sum::<f64>() / ls.len() as f64;
    let (a, b) = (mean(with), mean(without));
    outcome(
        a - b >= C6_MIN_GAP,
        format!("tail completion with encoding and bonus {a:.3}, without {b:.3}"),
    )
}

fn criterion_7() -> Outcome {
    let rm = parse_rm(
        "states: u0 u1 u2 u3\ninitial: u0\ngoals: u3\nalphabet: a b s\n\
         trans: u0 a u1\ntrans: u1 s u2\ntrans: u2 b u3\n",
    )
    .unwrap();
    let d = Decomposition::from_les(&rm, 0, common::les(&[vec!["a".into(), "s".into()], vec!["b".into(), "s".into()]]), 2.0, 0.5).unwrap();
    let active = ActiveDecomposition::new(&rm, &d);
    let ev = |n: &str| rm.event_id(n).unwrap();
    let mut checks = Vec::new();

    // a is private to agent 0
    let mut tts = TeamTaskState::new(&rm, &active);
    let before: Vec<_> = tts.subs.iter().map(|s| s.current()).collect();
    sync_step(&active, &mut tts, &[ev("a")]);
    checks.push(tts.subs[0].current() != before[0] && tts.subs[1].current() == before[1]);

    // s is shared; agent 0 cannot take it before a, so nobody moves
    let mut tts = TeamTaskState::new(&rm, &active);
    let before: Vec<_> = tts.subs.iter().map(|s| s.current()).collect();
    sync_step(&active, &mut tts, &[ev("s")]);
    checks.push(tts.subs.iter().map(|s| s.current()).collect::<Vec<_>>() == before);
    sync_step(&active, &mut tts, &[ev("a")]);
    sync_step(&active, &mut tts, &[ev("s")]);
    let r = sync_step(&active, &mut tts, &[ev("b")]);
    checks.push(r.sub == vec![0, 1] && r.overall == 1 && tts.done_overall);

    let (game, rm4, cons) = task("four_buttons");
    let p = TrainParams {
        mode: Mode::Monolithic,
        episodes: 300,
        seed: 7,
        gamma: game.spec().gamma,
        max_steps: game.spec().max_steps,
        ..TrainParams::default()
    };
    let log = train(&game, &rm4, &cons, &p).unwrap();
    checks.push(
        log.episodes
            .iter()
            .all(|e| e.sub_rewards.windows(2).all(|w| w[0] == w[1])),
    );
    let passed = checks.iter().filter(|&&c| c).count();
    outcome(passed == checks.len(), format!("{passed}/{} semantic checks", checks.len()))
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .filter(|(n, _)| n != "config.txt")
        .collect();
    files.sort();
    files
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (env, run) in [(EnvKind::FourButtons, "a"), (EnvKind::FourButtons, "b"), (EnvKind::Repairs, "c"), (EnvKind::Repairs, "d")] {
        let cfg = ExperimentConfig {
            env,
            episodes: 400,
            seeds: vec![3, 11],
            output: Some(tmp.path().join(run)),
            ..ExperimentConfig::default()
        };
        harness::run(&cfg).unwrap();
        outputs.push(read_dir_sorted(&tmp.path().join(run)));
    }
    let csvs = outputs[0].iter().filter(|(n, _)| n.ends_with(".csv")).count();
    let same = outputs[0] == outputs[1] && outputs[2] == outputs[3];
    outcome(same && csvs > 0, format!("{} files per run compared byte for byte across 2 environments", outputs[0].len()))
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        env: EnvKind::FourButtons,
        episodes: 200,
        seeds: vec![0, 1],
        output: Some(tmp.path().to_path_buf()),
        ..ExperimentConfig::default()
    };
    let entries = match harness::sweep_k(&cfg, &[1, 5, 10, 25]) {
        Ok(e) => e,
        Err(e) => return outcome(false, e.to_string()),
    };
    let sets: Vec<&Vec<String>> = entries.iter().map(|e| &e.summary.seeds[0].candidates).collect();
    let nested = sets.windows(2).all(|w| w[1].starts_with(w[0]));
    let shared_seeds = entries
        .iter()
        .all(|e| e.summary.seeds.iter().all(|s| s.candidates == e.summary.seeds[0].candidates));
    let curves = entries.iter().all(|e| e.summary.mean_best.len() == 200);
    let files = tmp.path().join("comparison.csv").exists() && tmp.path().join("k_25").join("aggregate.csv").exists();
    let sizes: Vec<String> = entries.iter().map(|e| format!("k={}:{}", e.k, e.available)).collect();
    outcome(
        nested && shared_seeds && curves && files && entries.len() == 4,
        format!("candidate counts {}; nested {nested}", sizes.join(" ")),
    )
}

fn main() {
    let heavy = thread::spawn(|| {
        let c5 = thread::spawn(criterion_5);
        let c6 = criterion_6();
        (c5.join().unwrap(), c6)
    });
    let light: Vec<(u32, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (7, criterion_7()),
        (8, criterion_8()),
        (9, criterion_9()),
    ];
    let (c5, c6) = heavy.join().unwrap();
    let mut all = light;
    all.push((5, c5));
    all.push((6, c6));
    all.sort_by_key(|(i, _)| *i);
    let names = [
        "",
        "validity oracle equivalence",
        "task candidate validity",
        "value estimate exactness",
        "bandit convergence",
        "decomposition beats monolithic",
        "dependent dynamics ablation",
        "synchronization semantics",
        "determinism",
        "k sweep",
    ];
    let mut failed = 0;
    for (i, o) in &all {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {i} {tag} {}: {}", names[*i as usize], o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
