//! Acceptance criteria C1-C9 on the 10x8 benchmark grid, seeds {0,1,2}.
//!
//! Each criterion prints one `PASS`/`FAIL` line to stderr (bypassing the test
//! harness capture) and then asserts. The experiment grid is run once and shared.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use optrepair::analysis::{edited_policy, is_dominated, lemma3_suite, theorem1_suite, theorem2_suite};
use optrepair::divergence::{build_reference, frechet_distance, occupancy_measure};
use optrepair::env::{value_iteration, GridAction, GridLanderEnv, GridState, Observation};
use optrepair::experiment::{desk_env, run_experiment, train_classifiers, ExperimentConfig, ExperimentResults, Prepared};
use optrepair::imitation::Policy;
use optrepair::trajectories::{Provenance, Step, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H1_BEG_CEILING: f64 = 0.5;
const H1_INVERSION_TOL: f64 = 0.02;
const H2_ACC_FULL: f64 = 0.70;
const H2_ACC_PART: f64 = 0.65;
const H2_MAX_FNR: f64 = 0.10;
const H2_MIN_TEST: usize = 300;
const H3_POST_FLOOR: f64 = 0.9;
const H3_PRE_CEILING: f64 = 0.6;
const OPTIONS_TOL: f64 = 0.02;
const OVERRIDE_DELTA_TOL: f64 = 0.03;
const ORACLE_CASES: usize = 500;
const OC_TOL: f64 = 1e-9;
const EPS_P: f64 = 0.1;

fn report(id: &str, pass: bool, detail: String) {
    let line = format!("{id} {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn desk_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

struct Run {
    results: ExperimentResults,
    elapsed: Duration,
    out: PathBuf,
    _dir: tempfile::TempDir,
}

fn run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("first");
        let start = Instant::now();
        let results = run_experiment(&desk_config(&out), false).unwrap();
        Run {
            results,
            elapsed: start.elapsed(),
            out,
            _dir: dir,
        }
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn c1_degradation_grows_with_eta() {
    let r = run();
    let c = r.results.clean_mean;
    let mut avg: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for row in &r.results.h1 {
        avg.entry((row.kind.clone(), row.gamma.to_string(), row.eta.to_string()))
            .or_default()
            .push(row.demo_mean);
    }
    let get = |k: &str, g: &str, e: &str| mean(&avg[&(k.to_string(), g.to_string(), e.to_string())]);
    let beg = get("BEG", "0.9", "0.9");
    let mut inversions = Vec::new();
    for kind in ["BEG", "MID", "END", "FLP"] {
        for g in ["0.3", "0.6", "0.9"] {
            let v: Vec<f64> = ["0.3", "0.6", "0.9"].iter().map(|e| get(kind, g, e)).collect();
            for w in v.windows(2) {
                if w[1] > w[0] {
                    inversions.push(w[1] - w[0]);
                }
            }
        }
    }
    let inversions_ok = inversions.is_empty() || (inversions.len() == 1 && inversions[0] <= H1_INVERSION_TOL * c);
    let fast = r.elapsed < Duration::from_secs(120);
    let pass = beg <= H1_BEG_CEILING * c && inversions_ok && fast;
    report(
        "C1",
        pass,
        format!(
            "C={c:.2} BEG(0.9,0.9)={beg:.2} ({:.3}C) inversions={inversions:?} run={:.1}s",
            beg / c,
            r.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn c2_classifier_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path());
    let start = Instant::now();
    let prep = Prepared::new(&cfg).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in [0u64, 1, 2] {
        for m in [1usize, 2, 3] {
            let trained = train_classifiers(&prep, seed, m).unwrap();
            let all = trained.rows.iter().find(|r| r.index.is_none()).unwrap();
            let floor = if m == 1 { H2_ACC_FULL } else { H2_ACC_PART };
            let ok = all.n_test >= H2_MIN_TEST && all.accuracy >= floor && all.false_negative_rate <= H2_MAX_FNR;
            pass &= ok;
            detail.push(format!(
                "s{seed}/M{m}: n={} acc={:.3} fnr={:.3}",
                all.n_test, all.accuracy, all.false_negative_rate
            ));
        }
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(60);
    report("C2", pass, format!("{} time={:.1}s", detail.join("; "), elapsed.as_secs_f64()));
    assert!(pass);
}

fn is_accept(d: &str) -> bool {
    d.starts_with("Acc")
}

#[test]
fn c3_end_attacks_are_repaired() {
    let r = run();
    let c = r.results.clean_mean;
    let mut pass = true;
    let mut misses = Vec::new();
    let mut n = 0;
    for row in &r.results.table {
        if row.loc != "END" || row.parts != 2 || row.eta < 0.6 || row.gamma > 0.6 {
            continue;
        }
        n += 1;
        let ok = is_accept(&row.part_decs[0])
            && row.part_decs[1] == "Rej"
            && row.post_mean >= H3_POST_FLOOR * c
            && row.pre_mean <= H3_PRE_CEILING * c;
        if !ok {
            misses.push(format!(
                "s{} eta={} gamma={}: {} pre={:.1} post={:.1}",
                row.seed,
                row.eta,
                row.gamma,
                row.part_decs.join("/"),
                row.pre_mean,
                row.post_mean
            ));
        }
        pass &= ok;
    }
    pass &= n == 12;
    report("C3", pass, format!("{}/{n} rows match; misses: {misses:?}", n - misses.len()));
    assert!(pass);
}

#[test]
fn c4_beg_attacks_are_rejected() {
    let r = run();
    let c = r.results.clean_mean;
    let mut pass = true;
    let mut n = 0;
    let mut misses = Vec::new();
    let mut m3 = Vec::new();
    for row in &r.results.table {
        if row.loc != "BEG" || row.eta < 0.6 {
            continue;
        }
        let ok = row.part_decs.iter().all(|d| d == "Rej") && row.post_mean >= H3_POST_FLOOR * c;
        match row.parts {
            2 => {
                n += 1;
                pass &= ok;
                if !ok {
                    misses.push(format!("s{} eta={} gamma={}", row.seed, row.eta, row.gamma));
                }
            }
            3 if !ok => m3.push(format!("s{} eta={} gamma={} {}", row.seed, row.eta, row.gamma, row.part_decs.join("/"))),
            _ => {}
        }
    }
    pass &= n == 18;
    report(
        "C4",
        pass,
        format!(
            "2-part rows {}/{n} all-Rej with post>=0.9C; misses {misses:?}; 3-part (informational) exceptions {}: {m3:?}",
            n - misses.len(),
            m3.len()
        ),
    );
    assert!(pass);
}

#[test]
fn c5_options_overhead() {
    let r = run();
    let c = r.results.clean_mean;
    let mut worst: f64 = 0.0;
    let mut over = 0;
    let mut n = 0;
    let mut m1_exact = true;
    let mut worst_post: f64 = 0.0;
    for row in &r.results.options {
        if row.parts == 1 {
            m1_exact &= row.pre_delta == 0.0 && row.post_delta == 0.0;
            continue;
        }
        worst_post = worst_post.max(row.post_delta.abs());
        if row.eta != 0.3 {
            continue;
        }
        n += 1;
        worst = worst.max(row.pre_delta.abs());
        over += usize::from(row.pre_delta.abs() > OPTIONS_TOL * c);
    }
    let pass = over == 0 && m1_exact;
    report(
        "C5",
        pass,
        format!(
            "eta=0.3 M in {{2,3}}: {over}/{n} cells exceed 2% of C, worst |delta|={worst:.2} ({:.3}C); M=1 exact zero: {m1_exact}; worst post-repair |delta|={worst_post:.2}",
            worst / c
        ),
    );
    assert!(pass);
}

#[test]
fn c6_override_ablation() {
    let r = run();
    let c = r.results.clean_mean;
    let mut high_flips = 0;
    let mut low_flips: BTreeMap<u64, usize> = BTreeMap::new();
    let mut worst_delta: f64 = 0.0;
    for row in r.results.overrides.iter().filter(|row| row.parts >= 2) {
        if row.eta >= 0.6 {
            high_flips += row.part_flips;
        } else if row.eta == 0.3 {
            *low_flips.entry(row.seed).or_default() += row.part_flips;
            worst_delta = worst_delta.max(row.delta.abs());
        }
    }
    let low_ok = low_flips.len() == 3 && low_flips.values().all(|&f| f >= 1);
    let pass = high_flips == 0 && low_ok && worst_delta <= OVERRIDE_DELTA_TOL * c;
    report(
        "C6",
        pass,
        format!(
            "eta>=0.6 flips={high_flips}; eta=0.3 flips per seed {low_flips:?}; worst |delta|={worst_delta:.2} ({:.4}C)",
            worst_delta / c
        ),
    );
    assert!(pass);
}

fn brute_frechet(p: &[Observation], q: &[Observation]) -> f64 {
    // Every monotone coupling from (0,0) to (n-1,m-1), enumerated recursively.
    fn walk(p: &[Observation], q: &[Observation], i: usize, j: usize, worst: f64, best: &mut f64) {
        let worst = worst.max(p[i].dist(&q[j]));
        if worst >= *best {
            return;
        }
        if i + 1 == p.len() && j + 1 == q.len() {
            *best = worst;
            return;
        }
        if i + 1 < p.len() {
            walk(p, q, i + 1, j, worst, best);
        }
        if j + 1 < q.len() {
            walk(p, q, i, j + 1, worst, best);
        }
        if i + 1 < p.len() && j + 1 < q.len() {
            walk(p, q, i + 1, j + 1, worst, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(p, q, 0, 0, 0.0, &mut best);
    best
}

fn random_walk(env: &GridLanderEnv, rng: &mut ChaCha8Rng, id: u64) -> Trajectory {
    let mut s = GridState::new(rng.gen_range(0..env.width), rng.gen_range(1..env.height));
    let mut steps = Vec::new();
    for _ in 0..rng.gen_range(1..=8) {
        if s.is_terminal() {
            break;
        }
        let a = GridAction::ALL[rng.gen_range(0..4)];
        let (next, reward) = env.step(s, a).unwrap();
        steps.push(Step {
            state: s,
            action: a,
            reward,
            observation: env.observe(s),
        });
        s = next;
    }
    Trajectory::new(id, steps, Provenance::Clean)
}

/// Occupancy by direct summation from raw counts of the clean set.
fn oc_oracle(demo: &[Step], clean: &[Trajectory], gamma: f64) -> f64 {
    let mut total = 0.0;
    for d in demo {
        let at_state = clean.iter().flat_map(|t| &t.steps).filter(|s| s.state == d.state).count();
        if at_state == 0 {
            continue;
        }
        let same = clean
            .iter()
            .flat_map(|t| &t.steps)
            .filter(|s| s.state == d.state && s.action == d.action)
            .count();
        let pi = same as f64 / at_state as f64;
        let mut inner = 0.0;
        for k in 0..=demo.len() {
            let hits = clean
                .iter()
                .filter(|t| t.steps.get(k).is_some_and(|s| s.state == d.state))
                .count();
            inner += gamma.powi(k as i32) * hits as f64 / clean.len() as f64;
        }
        total += pi * inner;
    }
    total
}

#[test]
fn c7_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut fd_mismatch = 0;
    for _ in 0..ORACLE_CASES {
        let poly = |rng: &mut ChaCha8Rng| -> Vec<Observation> {
            (0..rng.gen_range(1..=6))
                .map(|_| Observation::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
                .collect()
        };
        let (p, q) = (poly(&mut rng), poly(&mut rng));
        fd_mismatch += usize::from(frechet_distance(&p, &q) != brute_frechet(&p, &q));
    }
    let env = GridLanderEnv::new(5, 4, vec![2]).unwrap();
    let mut worst_oc: f64 = 0.0;
    for _ in 0..ORACLE_CASES {
        let clean: Vec<Trajectory> = (0..rng.gen_range(1..=6)).map(|i| random_walk(&env, &mut rng, i)).collect();
        let demo = random_walk(&env, &mut rng, 99);
        let gamma = rng.gen_range(0.0..=1.0);
        let reference = build_reference(&clean, gamma).unwrap();
        let got = occupancy_measure(&demo.steps, &reference);
        worst_oc = worst_oc.max((got - oc_oracle(&demo.steps, &clean, gamma)).abs());
    }
    let elapsed = start.elapsed();
    let pass = fd_mismatch == 0 && worst_oc <= OC_TOL && elapsed < Duration::from_secs(30);
    report(
        "C7",
        pass,
        format!(
            "frechet mismatches {fd_mismatch}/{ORACLE_CASES}; worst OC error {worst_oc:.2e}; time={:.2}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn c8_theory_suites() {
    let start = Instant::now();
    let env = desk_env();
    let optimal = value_iteration(&env, 1e-9).unwrap();
    let starts = env.top_row_starts();
    let t_max = env.default_t_max();

    let t1 = theorem1_suite(&env, &optimal, 200, 0, EPS_P).unwrap();

    // Dominated edited policies plus a policy that never steers.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut candidates: Vec<Policy> = Vec::new();
    while candidates.len() < 20 {
        let k = rng.gen_range(1..=6);
        let pi = edited_policy(&optimal, &env, k, &mut rng);
        if is_dominated(&pi, &optimal, &env, &starts, t_max, EPS_P).unwrap().dominated {
            candidates.push(pi);
        }
    }
    let mut noop = Policy::empty(env.width, env.height);
    for s in env.states().filter(|s| !s.is_terminal()) {
        noop.set_deterministic(s, GridAction::Noop);
    }
    candidates.push(noop);
    let mut t2_ok = 0;
    let mut worst_ratio = f64::INFINITY;
    for pi in &candidates {
        let t2 = theorem2_suite(pi, &optimal, &env, &starts, t_max, EPS_P).unwrap();
        worst_ratio = worst_ratio.min(t2.repair.final_ratio);
        t2_ok += usize::from(t2.monotone && t2.repair.final_ratio >= 1.0 - EPS_P);
    }

    let l2 = lemma3_suite(&env, &optimal, 200, 2, 0, EPS_P).unwrap();
    let l3 = lemma3_suite(&env, &optimal, 200, 3, 0, EPS_P).unwrap();
    let elapsed = start.elapsed();
    let pass = t1.counterexamples.is_empty()
        && t1.witness.is_some()
        && t2_ok == candidates.len()
        && l2.counterexamples.is_empty()
        && l3.counterexamples.is_empty()
        && elapsed < Duration::from_secs(60);
    report(
        "C8",
        pass,
        format!(
            "thm1: {} dominated of 200, {} counterexamples, witness {:?}; thm2: {t2_ok}/{} monotone and repaired (worst final ratio {worst_ratio:.4}); lemma3: M=2 {} / M=3 {} counterexamples over {} / {} checked; time={:.1}s",
            t1.dominated,
            t1.counterexamples.len(),
            t1.witness,
            candidates.len(),
            l2.counterexamples.len(),
            l3.counterexamples.len(),
            l2.checked,
            l3.checked,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn c9_rerun_is_byte_identical() {
    let r = run();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("second");
    run_experiment(&desk_config(&again), false).unwrap();
    let (a, b) = (csv_files(&r.out), csv_files(&again));
    let differing: Vec<&PathBuf> = a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k).collect();
    let pass = !a.is_empty() && a.len() == b.len() && differing.is_empty();
    report(
        "C9",
        pass,
        format!("{} CSV files compared, {} differ {differing:?}", a.len(), differing.len()),
    );
    assert!(pass);
}
