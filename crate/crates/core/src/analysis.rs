//! Executable checks for the policy-dominance results: dominance implies
//! divergence, Rule-1 repair drives the value gap down, and a dominated policy
//! is dominated on at least one temporal segment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::divergence::frechet_distance;
use crate::env::{rollout, GridAction, GridLanderEnv, GridState, Observation};
use crate::error::{Error, Result};
use crate::imitation::{evaluate, Policy};
use crate::trajectories::{part_lengths, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DominanceResult {
    pub ratio: f64,
    pub dominated: bool,
}

/// `pi` is dominated by `pi_prime` when `V(pi) / V(pi_prime) < 1 - eps_p`.
pub fn is_dominated(
    pi: &Policy,
    pi_prime: &Policy,
    env: &GridLanderEnv,
    starts: &[GridState],
    t_max: usize,
    eps_p: f64,
) -> Result<DominanceResult> {
    let reference = evaluate(pi_prime, env, starts, t_max)?.mean_return;
    if reference == 0.0 {
        return Err(Error::ZeroReference);
    }
    let ratio = evaluate(pi, env, starts, t_max)?.mean_return / reference;
    Ok(DominanceResult {
        ratio,
        dominated: ratio < 1.0 - eps_p,
    })
}

pub fn are_divergent(t1: &[Observation], t2: &[Observation], delta: f64) -> bool {
    frechet_distance(t1, t2) > delta
}

/// Copy of `pi` whose entry at `s` is the target's distribution at `s`.
/// Stored entries at other states are untouched.
pub fn local_repair(pi: &Policy, s: GridState, target: &Policy) -> Policy {
    let mut out = pi.clone();
    out.set_probs(s, target.probs(s))
        .expect("target distributions are valid");
    out
}

fn rollouts(pi: &Policy, env: &GridLanderEnv, starts: &[GridState], t_max: usize) -> Result<Vec<Trajectory>> {
    starts.iter().map(|&s| rollout(env, pi, s, t_max)).collect()
}

fn mean_return(ts: &[Trajectory]) -> f64 {
    ts.iter().map(|t| t.steps.iter().map(|s| s.reward).sum::<f64>()).sum::<f64>() / ts.len() as f64
}

fn return_to_go(t: &Trajectory) -> Vec<f64> {
    let mut g = vec![0.0; t.len() + 1];
    for k in (0..t.len()).rev() {
        g[k] = g[k + 1] + t.steps[k].reward;
    }
    g
}

/// Observations of every visited state, including the one the last action leads to.
/// Two rollouts that differ only in their final action still end in different states.
pub fn state_path(env: &GridLanderEnv, t: &Trajectory) -> Vec<Observation> {
    let mut path = t.observations();
    if let Some(last) = t.steps.last() {
        path.push(env.observe(env.successor(last.state, last.action)));
    }
    path
}

/// Largest Fréchet distance between paired rollouts.
fn max_divergence(env: &GridLanderEnv, a: &[Trajectory], b: &[Trajectory]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| frechet_distance(&state_path(env, x), &state_path(env, y)))
        .fold(0.0, f64::max)
}

/// States satisfying Rule 1 on time-aligned rollouts, in start then time order.
///
/// State `s_t` of `pi`'s rollout qualifies when `pi` and the target disagree
/// there and `pi`'s return-to-go falls short: `G_pi(t) < G_tar(t) - eps_p * |G_tar(t)|`.
pub fn rule1_candidates(
    pi: &Policy,
    target: &Policy,
    env: &GridLanderEnv,
    starts: &[GridState],
    t_max: usize,
    eps_p: f64,
) -> Result<Vec<GridState>> {
    let mut out: Vec<GridState> = Vec::new();
    for &s0 in starts {
        let tp = rollout(env, pi, s0, t_max)?;
        let tt = rollout(env, target, s0, t_max)?;
        let (gp, gt) = (return_to_go(&tp), return_to_go(&tt));
        for (k, step) in tp.steps.iter().enumerate() {
            let g_tar = gt.get(k).copied().unwrap_or(0.0);
            let violated = gp[k] < g_tar - eps_p * g_tar.abs();
            if violated && pi.greedy(step.state) != target.greedy(step.state) && !out.contains(&step.state) {
                out.push(step.state);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub state: GridState,
    /// `V(target) - V(pi)` after this repair.
    pub delta_v: f64,
    /// Largest Fréchet distance between paired rollouts after this repair.
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairSet {
    pub states: Vec<GridState>,
    pub initial_delta_v: f64,
    pub initial_divergence: f64,
    pub trace: Vec<TraceEntry>,
    pub final_ratio: f64,
    pub repaired: Policy,
}

/// Applies Rule 1 until `V(pi) / V(target) >= 1 - eps_p`, no state qualifies, or
/// `|S|` repairs have been made. Each round repairs the qualifying state whose
/// repair leaves the smallest value gap (first in candidate order on ties).
pub fn build_repair_set(
    pi: &Policy,
    target: &Policy,
    env: &GridLanderEnv,
    starts: &[GridState],
    t_max: usize,
    eps_p: f64,
) -> Result<RepairSet> {
    let target_runs = rollouts(target, env, starts, t_max)?;
    let v_tar = mean_return(&target_runs);
    if v_tar == 0.0 {
        return Err(Error::ZeroReference);
    }
    let mut current = pi.clone();
    let mut runs = rollouts(&current, env, starts, t_max)?;
    let initial_delta_v = v_tar - mean_return(&runs);
    let initial_divergence = max_divergence(env, &runs, &target_runs);
    let mut states = Vec::new();
    let mut trace = Vec::new();
    let cap = env.width * env.height;

    while states.len() < cap && mean_return(&runs) / v_tar < 1.0 - eps_p {
        let candidates = rule1_candidates(&current, target, env, starts, t_max, eps_p)?;
        let mut best: Option<(f64, GridState, Policy, Vec<Trajectory>)> = None;
        for s in candidates {
            let trial = local_repair(&current, s, target);
            let trial_runs = rollouts(&trial, env, starts, t_max)?;
            let gap = v_tar - mean_return(&trial_runs);
            if best.as_ref().is_none_or(|(bg, ..)| gap < *bg) {
                best = Some((gap, s, trial, trial_runs));
            }
        }
        let Some((gap, s, trial, trial_runs)) = best else {
            break;
        };
        current = trial;
        runs = trial_runs;
        states.push(s);
        trace.push(TraceEntry {
            state: s,
            delta_v: gap,
            divergence: max_divergence(env, &runs, &target_runs),
        });
    }
    Ok(RepairSet {
        states,
        initial_delta_v,
        initial_divergence,
        trace,
        final_ratio: mean_return(&runs) / v_tar,
        repaired: current,
    })
}

/// Optimal policy with `k` random single-state edits to a different action.
pub fn edited_policy(optimal: &Policy, env: &GridLanderEnv, k: usize, rng: &mut ChaCha8Rng) -> Policy {
    let states: Vec<GridState> = env.states().filter(|s| !s.is_terminal()).collect();
    let mut pi = optimal.clone();
    for _ in 0..k {
        let s = states[rng.gen_range(0..states.len())];
        let old = pi.greedy(s);
        let others: Vec<GridAction> = GridAction::ALL.into_iter().filter(|&a| a != old).collect();
        pi.set_deterministic(s, others[rng.gen_range(0..others.len())]);
    }
    pi
}

pub const MAX_EDITS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    pub sampled: usize,
    pub dominated: usize,
    /// Sample indices where a dominated pair did not diverge.
    pub counterexamples: Vec<usize>,
    /// A sample whose rollouts diverge although neither policy dominates.
    pub witness: Option<usize>,
}

/// Samples `n` edited-optimal policies and checks that every dominated one
/// diverges from the optimum at the start with the largest return gap.
pub fn theorem1_suite(
    env: &GridLanderEnv,
    optimal: &Policy,
    n: usize,
    seed: u64,
    eps_p: f64,
) -> Result<Theorem1Report> {
    let starts = env.top_row_starts();
    let t_max = env.default_t_max();
    let opt_runs = rollouts(optimal, env, &starts, t_max)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Theorem1Report {
        sampled: n,
        dominated: 0,
        counterexamples: Vec::new(),
        witness: None,
    };
    for i in 0..n {
        let k = rng.gen_range(1..=MAX_EDITS);
        let pi = edited_policy(optimal, env, k, &mut rng);
        let dom = is_dominated(&pi, optimal, env, &starts, t_max, eps_p)?;
        let runs = rollouts(&pi, env, &starts, t_max)?;
        if dom.dominated {
            report.dominated += 1;
            let gap = |j: usize| (mean_return(&opt_runs[j..=j]) - mean_return(&runs[j..=j])).abs();
            let j = (0..starts.len())
                .max_by(|&a, &b| gap(a).total_cmp(&gap(b)).then(b.cmp(&a)))
                .expect("non-empty starts");
            if !are_divergent(&state_path(env, &runs[j]), &state_path(env, &opt_runs[j]), 0.0) {
                report.counterexamples.push(i);
            }
        } else if report.witness.is_none() && max_divergence(env, &runs, &opt_runs) > 0.0 {
            report.witness = Some(i);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem2Report {
    pub repair: RepairSet,
    /// `delta_v` never increased along the trace.
    pub monotone: bool,
}

pub fn theorem2_suite(
    pi: &Policy,
    target: &Policy,
    env: &GridLanderEnv,
    starts: &[GridState],
    t_max: usize,
    eps_p: f64,
) -> Result<Theorem2Report> {
    let repair = build_repair_set(pi, target, env, starts, t_max, eps_p)?;
    let mut prev = repair.initial_delta_v;
    let mut monotone = true;
    for e in &repair.trace {
        monotone &= e.delta_v <= prev;
        prev = e.delta_v;
    }
    Ok(Theorem2Report { repair, monotone })
}

/// Mean undiscounted reward of each of `m` temporal segments, each rollout
/// split by its own length.
pub fn segment_values(runs: &[Trajectory], m: usize) -> Vec<f64> {
    let mut v = vec![0.0; m];
    for t in runs {
        let mut start = 0;
        for (i, len) in part_lengths(t.len(), m).into_iter().enumerate() {
            v[i] += t.steps[start..start + len].iter().map(|s| s.reward).sum::<f64>();
            start += len;
        }
    }
    v.iter_mut().for_each(|x| *x /= runs.len() as f64);
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lemma3Report {
    pub sampled: usize,
    pub checked: usize,
    pub counterexamples: Vec<usize>,
}

/// For each sampled dominated pair, at least one segment of the edited policy
/// must be worth strictly less than the same segment of the optimum.
pub fn lemma3_suite(
    env: &GridLanderEnv,
    optimal: &Policy,
    n: usize,
    m: usize,
    seed: u64,
    eps_p: f64,
) -> Result<Lemma3Report> {
    if m < 2 {
        return Err(Error::InvalidArgument("segment check needs m >= 2".into()));
    }
    let starts = env.top_row_starts();
    let t_max = env.default_t_max();
    let opt_seg = segment_values(&rollouts(optimal, env, &starts, t_max)?, m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Lemma3Report {
        sampled: n,
        checked: 0,
        counterexamples: Vec::new(),
    };
    for i in 0..n {
        let k = rng.gen_range(1..=MAX_EDITS);
        let pi = edited_policy(optimal, env, k, &mut rng);
        if !is_dominated(&pi, optimal, env, &starts, t_max, eps_p)?.dominated {
            continue;
        }
        report.checked += 1;
        let seg = segment_values(&rollouts(&pi, env, &starts, t_max)?, m);
        if !seg.iter().zip(&opt_seg).any(|(a, b)| a < b) {
            report.counterexamples.push(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::value_iteration;

    fn desk() -> (GridLanderEnv, Policy) {
        let env = GridLanderEnv {
            r_descent: 10.0,
            ..GridLanderEnv::default()
        };
        let pi = value_iteration(&env, 1e-9).unwrap();
        (env, pi)
    }

    fn always(env: &GridLanderEnv, a: GridAction) -> Policy {
        let mut pi = Policy::empty(env.width, env.height);
        for s in env.states() {
            pi.set_deterministic(s, a);
        }
        pi
    }

    #[test]
    fn dominance_examples() {
        let (env, opt) = desk();
        let starts = env.top_row_starts();
        let t = env.default_t_max();
        let same = is_dominated(&opt, &opt, &env, &starts, t, 0.0).unwrap();
        assert_eq!(same, DominanceResult { ratio: 1.0, dominated: false });
        let off_pad = [GridState::new(0, 7), GridState::new(9, 7)];
        let noop = always(&env, GridAction::Noop);
        assert!(is_dominated(&noop, &opt, &env, &off_pad, t, 0.1).unwrap().dominated);
    }

    #[test]
    fn divergence_examples() {
        let p = [Observation::new(0.0, 0.0), Observation::new(1.0, 0.0)];
        let q = [Observation::new(0.0, 1.0), Observation::new(1.0, 1.0)];
        assert!(!are_divergent(&p, &p, 0.0));
        assert!(are_divergent(&p, &q, 0.5));
    }

    #[test]
    fn local_repair_touches_one_state() {
        let (env, opt) = desk();
        let noop = always(&env, GridAction::Noop);
        let s = GridState::new(0, 4);
        let r = local_repair(&noop, s, &opt);
        let diff = env.states().filter(|&x| r.stored(x) != noop.stored(x)).count();
        assert_eq!(diff, usize::from(opt.greedy(s) != GridAction::Noop));
        assert_eq!(local_repair(&r, s, &opt), r);
        let here = opt.greedy(GridState::new(4, 7));
        assert_eq!(local_repair(&opt, GridState::new(4, 7), &opt), opt);
        assert_eq!(r.greedy(GridState::new(4, 7)), GridAction::Noop);
        assert_eq!(here, GridAction::Noop);
    }

    #[test]
    fn single_edit_repairs_in_one_step() {
        let (env, opt) = desk();
        let mut pi = opt.clone();
        // Hovering forever at the pad column's entry row loses the landing.
        pi.set_deterministic(GridState::new(4, 3), GridAction::Main);
        let starts = env.top_row_starts();
        let t = env.default_t_max();
        let rep = build_repair_set(&pi, &opt, &env, &starts, t, 0.0).unwrap();
        assert_eq!(rep.states, vec![GridState::new(4, 3)]);
        assert_eq!(rep.final_ratio, 1.0);
        let last = rep.trace.last().unwrap();
        assert_eq!((last.delta_v, last.divergence), (0.0, 0.0));
    }

    #[test]
    fn identical_policies_need_no_repair() {
        let (env, opt) = desk();
        let rep = build_repair_set(&opt, &opt, &env, &env.top_row_starts(), 32, 0.1).unwrap();
        assert!(rep.states.is_empty() && rep.trace.is_empty());
    }

    #[test]
    fn always_noop_on_small_grid_is_repaired() {
        let mut env = GridLanderEnv::new(5, 4, [2]).unwrap();
        env.r_descent = 10.0;
        let opt = value_iteration(&env, 1e-9).unwrap();
        let noop = always(&env, GridAction::Noop);
        let r = theorem2_suite(&noop, &opt, &env, &env.top_row_starts(), env.default_t_max(), 0.1).unwrap();
        assert!(r.monotone, "{:?}", r.repair.trace);
        assert!(r.repair.final_ratio >= 0.9);
    }

    #[test]
    fn segment_values_sum_to_value() {
        let (env, opt) = desk();
        let runs = rollouts(&opt, &env, &env.top_row_starts(), 32).unwrap();
        let seg = segment_values(&runs, 3);
        assert!((seg.iter().sum::<f64>() - mean_return(&runs)).abs() < 1e-9);
    }
}
