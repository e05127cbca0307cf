//! Options-based repair: classify each temporal part of each demonstration,
//! train one sub-policy per part index on clean plus accepted parts, and chain
//! the resulting options at run time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use crate::classifier::{Chi, Decision};
use crate::divergence::{build_reference, features, nearest_clean, CleanReference, DivergenceFeatures};
use crate::env::{GridLanderEnv, GridState, Observation};
use crate::error::{Error, Result};
use crate::imitation::{behavior_clone, median, Policy, PolicyValue};
use crate::trajectories::{split, split_steps, Demonstration, Provenance, Step, Trajectory, TrajectoryPart};

/// Initiation set, sub-policy, termination set for one part index.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalOption {
    pub index: usize,
    pub initiation: BTreeSet<GridState>,
    pub policy: Policy,
    pub termination: BTreeSet<GridState>,
}

/// Termination state of option `i` to its nearest initiation state of option `i + 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChainDict {
    maps: Vec<BTreeMap<GridState, GridState>>,
}

impl ChainDict {
    pub fn get(&self, option: usize, s: GridState) -> Option<GridState> {
        self.maps.get(option).and_then(|m| m.get(&s).copied())
    }

    pub fn entries(&self, option: usize) -> impl Iterator<Item = (&GridState, &GridState)> {
        self.maps.get(option).into_iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.maps.iter().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reason {
    ClassifierAccept,
    ReturnRatioOverride,
    Reject,
}

impl Reason {
    pub fn decision(self) -> Decision {
        match self {
            Reason::Reject => Decision::Reject,
            _ => Decision::Accept,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartDecision {
    pub parent: u64,
    pub index: usize,
    pub features: DivergenceFeatures,
    pub predicted: Decision,
    pub reason: Reason,
    pub demo_return: f64,
    pub clean_return: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepairConfig {
    pub parts: usize,
    pub eps_p: f64,
    pub use_override: bool,
}

impl Default for RepairConfig {
    fn default() -> Self {
        RepairConfig {
            parts: 2,
            eps_p: 0.1,
            use_override: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RepairOutcome {
    pub options: Vec<TemporalOption>,
    pub chain: ChainDict,
    pub decisions: Vec<PartDecision>,
    /// Demonstrations shorter than the number of parts.
    pub skipped: Vec<u64>,
}

impl RepairOutcome {
    pub fn demo_steps_used(&self) -> usize {
        self.decisions
            .iter()
            .filter(|d| d.reason != Reason::Reject)
            .map(|d| d.steps)
            .sum()
    }

    pub fn demo_steps_discarded(&self) -> usize {
        self.decisions
            .iter()
            .filter(|d| d.reason == Reason::Reject)
            .map(|d| d.steps)
            .sum()
    }
}

/// Clean part minimizing Fréchet distance to `part`.
pub fn match_clean_part<'a>(part: &TrajectoryPart, clean_parts: &[&'a TrajectoryPart]) -> Option<&'a TrajectoryPart> {
    nearest_clean(part, clean_parts).map(|i| clean_parts[i])
}

fn nearest_by_observation(env: &GridLanderEnv, s: GridState, pool: &BTreeSet<GridState>) -> Option<GridState> {
    let o = env.observe(s);
    let mut best: Option<(f64, GridState)> = None;
    for &c in pool {
        let d = o.dist(&env.observe(c));
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, c));
        }
    }
    best.map(|(_, c)| c)
}

/// Clean parts split at one granularity, with the statistics every demo part is scored against.
#[derive(Debug, Clone)]
pub struct CleanIndex {
    pub parts: usize,
    reference: CleanReference,
    by_index: Vec<Vec<TrajectoryPart>>,
    /// Clean parts with duplicates removed; identical parts give identical distances.
    distinct: Vec<Vec<TrajectoryPart>>,
}

impl CleanIndex {
    pub fn new(env: &GridLanderEnv, clean: &[Trajectory], parts: usize) -> Result<Self> {
        if parts == 0 {
            return Err(Error::InvalidArgument("number of parts must be >= 1".into()));
        }
        let reference = build_reference(clean, env.gamma)?;
        let mut by_index: Vec<Vec<TrajectoryPart>> = vec![Vec::new(); parts];
        for t in clean.iter().filter(|t| t.len() >= parts) {
            for p in split(t, parts)? {
                by_index[p.index].push(p);
            }
        }
        if by_index[0].is_empty() {
            return Err(Error::Empty("no clean trajectory is long enough to split"));
        }
        let distinct = by_index
            .iter()
            .map(|ps| {
                let mut out: Vec<TrajectoryPart> = Vec::new();
                for p in ps {
                    if !out.iter().any(|q| q.steps == p.steps) {
                        out.push(p.clone());
                    }
                }
                out
            })
            .collect();
        Ok(CleanIndex {
            parts,
            reference,
            by_index,
            distinct,
        })
    }

    pub fn clean_parts(&self, index: usize) -> &[TrajectoryPart] {
        &self.by_index[index]
    }

    pub fn features(&self, part: &TrajectoryPart) -> DivergenceFeatures {
        let refs: Vec<&TrajectoryPart> = self.distinct[part.index].iter().collect();
        features(part, &refs, &self.reference)
    }

    /// Return of the Fréchet-nearest clean part with the same index.
    pub fn matched_return(&self, part: &TrajectoryPart) -> f64 {
        let refs: Vec<&TrajectoryPart> = self.distinct[part.index].iter().collect();
        match_clean_part(part, &refs).map_or(0.0, TrajectoryPart::ret)
    }

    /// Best clean part-return at `index`.
    pub fn r_max(&self, index: usize) -> f64 {
        self.by_index[index]
            .iter()
            .map(TrajectoryPart::ret)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Builds options from clean and demonstrated trajectories.
///
/// `chis[i]` classifies parts with index `i`. Decisions read only features and
/// returns; demonstrations arrive without provenance.
pub fn repair_options(
    env: &GridLanderEnv,
    clean: &[Trajectory],
    demo: &[Demonstration<'_>],
    chis: &[Chi],
    cfg: &RepairConfig,
) -> Result<RepairOutcome> {
    let index = CleanIndex::new(env, clean, cfg.parts)?;
    repair_with_index(env, &index, demo, chis, cfg)
}

pub fn repair_with_index(
    env: &GridLanderEnv,
    index: &CleanIndex,
    demo: &[Demonstration<'_>],
    chis: &[Chi],
    cfg: &RepairConfig,
) -> Result<RepairOutcome> {
    let m = index.parts;
    if cfg.parts != m {
        return Err(Error::InvalidArgument(format!(
            "clean index has {m} parts but repair asks for {}",
            cfg.parts
        )));
    }
    if chis.len() != m {
        return Err(Error::InvalidArgument(format!(
            "need one classifier per part index ({m}), got {}",
            chis.len()
        )));
    }
    let mut decisions = Vec::new();
    let mut accepted: Vec<Vec<TrajectoryPart>> = vec![Vec::new(); m];
    let mut skipped = Vec::new();
    for d in demo {
        if d.steps.len() < m {
            log::warn!("demonstration {} has {} steps; cannot split into {m}", d.id, d.steps.len());
            skipped.push(d.id);
            continue;
        }
        for part in split_steps(d.id, d.steps, m)? {
            let decision = decide(&part, index, &chis[part.index], cfg);
            if decision.reason != Reason::Reject {
                accepted[part.index].push(part);
            }
            decisions.push(decision);
        }
    }

    let train: Vec<Vec<&TrajectoryPart>> = (0..m)
        .map(|i| index.clean_parts(i).iter().chain(&accepted[i]).collect())
        .collect();
    let (options, chain) = options_from_parts(env, &train)?;
    Ok(RepairOutcome {
        options,
        chain,
        decisions,
        skipped,
    })
}

/// One option per part index, cloned from `train[i]`, plus the chain dictionary.
pub fn options_from_parts(
    env: &GridLanderEnv,
    train: &[Vec<&TrajectoryPart>],
) -> Result<(Vec<TemporalOption>, ChainDict)> {
    let mut options = Vec::with_capacity(train.len());
    for (i, parts) in train.iter().enumerate() {
        let policy = behavior_clone(parts.iter().map(|p| p.steps.as_slice()), env.width, env.height)?;
        options.push(TemporalOption {
            index: i,
            initiation: parts.iter().map(|p| p.first_state()).collect(),
            policy,
            termination: parts.iter().map(|p| p.end_state()).collect(),
        });
    }
    let mut chain = ChainDict::default();
    for i in 0..options.len().saturating_sub(1) {
        let map = options[i]
            .termination
            .iter()
            .filter_map(|&s| nearest_by_observation(env, s, &options[i + 1].initiation).map(|t| (s, t)))
            .collect();
        chain.maps.push(map);
    }
    Ok((options, chain))
}

fn decide(part: &TrajectoryPart, index: &CleanIndex, chi: &Chi, cfg: &RepairConfig) -> PartDecision {
    let f = index.features(part);
    let predicted = chi.predict(&f);
    let demo_return = part.ret();
    let clean_return = index.matched_return(part);
    let reason = match predicted {
        Decision::Accept => Reason::ClassifierAccept,
        Decision::Reject
            if cfg.use_override && clean_return > 0.0 && demo_return / clean_return > 1.0 - cfg.eps_p =>
        {
            Reason::ReturnRatioOverride
        }
        Decision::Reject => Reason::Reject,
    };
    PartDecision {
        parent: part.parent,
        index: part.index,
        features: f,
        predicted,
        reason,
        demo_return,
        clean_return,
        steps: part.steps.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskOutcome {
    Success,
    Failure,
}

/// Default hand-off radius: one and a half grid cells in observation space.
pub fn default_eps_chain(env: &GridLanderEnv) -> f64 {
    1.5 * (1.0 / env.width as f64).max(1.0 / env.height as f64)
}

/// Runs the options in order from `s0`.
///
/// After each step, if the true state is within `eps_chain` of a termination
/// state of the current option, control passes to the next option and its first
/// query uses the chained initiation state. Dynamics always continue from the
/// true state.
pub fn chain_options(
    s0: GridState,
    options: &[TemporalOption],
    chain: &ChainDict,
    env: &GridLanderEnv,
    eps_chain: f64,
    t_max: usize,
) -> Result<(TaskOutcome, Trajectory)> {
    if options.is_empty() {
        return Err(Error::Empty("chaining needs at least one option"));
    }
    let mut steps: Vec<Step> = Vec::new();
    let mut s = s0;
    let mut cur = 0;
    let mut alias: Option<GridState> = None;
    let outcome = loop {
        if s.is_terminal() {
            break if env.is_goal(s) {
                TaskOutcome::Success
            } else {
                TaskOutcome::Failure
            };
        }
        if steps.len() >= t_max {
            break TaskOutcome::Failure;
        }
        let query = alias.take().unwrap_or(s);
        let a = options[cur].policy.greedy(query);
        let (next, reward) = env.step(s, a)?;
        steps.push(Step {
            state: s,
            action: a,
            reward,
            observation: env.observe(s),
        });
        s = next;
        if cur + 1 < options.len() {
            if let Some(end) = closest_within(env.observe(s), &options[cur].termination, env, eps_chain) {
                alias = Some(chain.get(cur, end).ok_or(Error::MissingChain(end))?);
                cur += 1;
            }
        }
    };
    Ok((outcome, Trajectory::new(0, steps, Provenance::Unknown)))
}

fn closest_within(o: Observation, pool: &BTreeSet<GridState>, env: &GridLanderEnv, eps: f64) -> Option<GridState> {
    let mut best: Option<(f64, GridState)> = None;
    for &c in pool {
        let d = o.dist(&env.observe(c));
        if d <= eps && best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, c));
        }
    }
    best.map(|(_, c)| c)
}

/// One chained episode per start state.
pub fn evaluate_options(
    options: &[TemporalOption],
    chain: &ChainDict,
    env: &GridLanderEnv,
    starts: &[GridState],
    eps_chain: f64,
    t_max: usize,
) -> Result<PolicyValue> {
    if starts.is_empty() {
        return Err(Error::Empty("evaluation needs at least one start state"));
    }
    let returns = starts
        .iter()
        .map(|&s| {
            let (_, t) = chain_options(s, options, chain, env, eps_chain, t_max)?;
            Ok(t.steps.iter().map(|s| s.reward).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(PolicyValue::from_returns(returns))
}

/// Aggregate decision for one part index across all demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexDecision {
    pub decision: Decision,
    /// Accept was reached only with the help of return-ratio overrides.
    pub via_override: bool,
}

impl fmt::Display for IndexDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.decision, if self.via_override { "*" } else { "" })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReasonCounts {
    pub classifier_accept: usize,
    pub override_accept: usize,
    pub reject: usize,
}

impl ReasonCounts {
    pub fn total(&self) -> usize {
        self.classifier_accept + self.override_accept + self.reject
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairReport {
    pub per_index: Vec<IndexDecision>,
    pub counts: ReasonCounts,
    pub steps_used: usize,
    pub steps_discarded: usize,
    pub pre: PolicyValue,
    pub post: PolicyValue,
}

/// Majority over demonstrated parts at each index; ties go to Reject.
pub fn index_decisions(decisions: &[PartDecision], parts: usize) -> Vec<IndexDecision> {
    (0..parts)
        .map(|i| {
            let at: Vec<&PartDecision> = decisions.iter().filter(|d| d.index == i).collect();
            let by_classifier = at.iter().filter(|d| d.reason == Reason::ClassifierAccept).count();
            let accepted = at.iter().filter(|d| d.reason != Reason::Reject).count();
            let decision = if 2 * accepted > at.len() {
                Decision::Accept
            } else {
                Decision::Reject
            };
            IndexDecision {
                decision,
                via_override: decision == Decision::Accept && 2 * by_classifier <= at.len(),
            }
        })
        .collect()
}

pub fn report(pre: PolicyValue, post: PolicyValue, decisions: &[PartDecision], parts: usize) -> RepairReport {
    let mut counts = ReasonCounts::default();
    let (mut used, mut discarded) = (0, 0);
    for d in decisions {
        match d.reason {
            Reason::ClassifierAccept => counts.classifier_accept += 1,
            Reason::ReturnRatioOverride => counts.override_accept += 1,
            Reason::Reject => counts.reject += 1,
        }
        if d.reason == Reason::Reject {
            discarded += d.steps;
        } else {
            used += d.steps;
        }
    }
    RepairReport {
        per_index: index_decisions(decisions, parts),
        counts,
        steps_used: used,
        steps_discarded: discarded,
        pre,
        post,
    }
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub seed: u64,
    pub parts: usize,
    pub loc: String,
    pub eta: f64,
    pub gamma: f64,
    pub full_dec: String,
    pub part_decs: Vec<String>,
    pub pre_median: f64,
    pub pre_mean: f64,
    pub post_median: f64,
    pub post_mean: f64,
    /// Demonstrated steps kept for training by the part-wise repair.
    pub steps_used: usize,
    /// Demonstrated steps kept when whole trajectories are judged.
    pub full_steps_used: usize,
}

pub const REPORT_HEADER: [&str; 13] = [
    "seed",
    "parts",
    "loc",
    "eta",
    "gamma",
    "full_dec",
    "part_decs",
    "pre_median",
    "pre_mean",
    "post_median",
    "post_mean",
    "steps_used",
    "full_steps_used",
];

impl ReportRow {
    pub fn from_report(
        seed: u64,
        loc: &str,
        eta: f64,
        gamma: f64,
        full: &RepairReport,
        r: &RepairReport,
    ) -> Self {
        ReportRow {
            seed,
            parts: r.per_index.len(),
            loc: loc.to_string(),
            eta,
            gamma,
            full_dec: full.per_index.first().map_or_else(String::new, ToString::to_string),
            part_decs: r.per_index.iter().map(ToString::to_string).collect(),
            pre_median: median(&r.pre.returns),
            pre_mean: r.pre.mean_return,
            post_median: median(&r.post.returns),
            post_mean: r.post.mean_return,
            steps_used: r.steps_used,
            full_steps_used: full.steps_used,
        }
    }

    pub fn record(&self) -> [String; 13] {
        [
            self.seed.to_string(),
            self.parts.to_string(),
            self.loc.clone(),
            self.eta.to_string(),
            self.gamma.to_string(),
            self.full_dec.clone(),
            self.part_decs.join("/"),
            self.pre_median.to_string(),
            self.pre_mean.to_string(),
            self.post_median.to_string(),
            self.post_mean.to_string(),
            self.steps_used.to_string(),
            self.full_steps_used.to_string(),
        ]
    }
}

pub fn write_report_rows<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))?;
    Ok(())
}

pub fn read_report_rows<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(input);
    if rd.headers()?.iter().ne(REPORT_HEADER) {
        return Err(Error::parse(1, "unexpected report header"));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|e| Error::parse(line, format!("{}: {e}", REPORT_HEADER[k])))
        };
        rows.push(ReportRow {
            seed: rec[0].parse().map_err(|e| Error::parse(line, format!("seed: {e}")))?,
            parts: rec[1].parse().map_err(|e| Error::parse(line, format!("parts: {e}")))?,
            loc: rec[2].to_string(),
            eta: num(3)?,
            gamma: num(4)?,
            full_dec: rec[5].to_string(),
            part_decs: rec[6].split('/').map(str::to_string).collect(),
            pre_median: num(7)?,
            pre_mean: num(8)?,
            post_median: num(9)?,
            post_mean: num(10)?,
            steps_used: rec[11].parse().map_err(|e| Error::parse(line, format!("steps_used: {e}")))?,
            full_steps_used: rec[12]
                .parse()
                .map_err(|e| Error::parse(line, format!("full_steps_used: {e}")))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{train_chi, LabeledFeature};
    use crate::env::{rollout, value_iteration, GridAction};
    use crate::imitation::evaluate;
    use crate::trajectories::TrajectorySet;

    fn desk() -> (GridLanderEnv, Vec<Trajectory>) {
        let env = GridLanderEnv {
            r_descent: 10.0,
            ..GridLanderEnv::default()
        };
        let pi = value_iteration(&env, 1e-9).unwrap();
        let clean = env
            .top_row_starts()
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut t = rollout(&env, &pi, s, env.default_t_max()).unwrap();
                t.id = i as u64;
                t
            })
            .collect();
        (env, clean)
    }

    /// Accepts near-zero FD, rejects everything far away.
    fn simple_chi() -> Chi {
        let mut data = Vec::new();
        for k in 0..10 {
            let x = k as f64 / 10.0;
            data.push(LabeledFeature {
                features: DivergenceFeatures { oc: 1.0 + x, fd: 0.0 },
                label: Decision::Accept,
            });
            data.push(LabeledFeature {
                features: DivergenceFeatures { oc: x, fd: 0.5 + x },
                label: Decision::Reject,
            });
        }
        train_chi(&data).unwrap()
    }

    #[test]
    fn self_repair_accepts_everything() {
        let (env, clean) = desk();
        let set = TrajectorySet::new(clean.clone());
        let cfg = RepairConfig::default();
        let chis = vec![simple_chi(); cfg.parts];
        let out = repair_options(&env, &clean, &set.demonstrations(), &chis, &cfg).unwrap();
        assert!(out.decisions.iter().all(|d| d.reason == Reason::ClassifierAccept));
        let starts = env.top_row_starts();
        let t_max = env.default_t_max();
        let monolithic = behavior_clone(clean.iter().map(|t| t.steps.as_slice()), env.width, env.height).unwrap();
        let mono = evaluate(&monolithic, &env, &starts, t_max).unwrap();
        let chained = evaluate_options(&out.options, &out.chain, &env, &starts, default_eps_chain(&env), t_max).unwrap();
        assert!((chained.mean_return - mono.mean_return).abs() <= 0.02 * mono.mean_return);
    }

    #[test]
    fn chain_is_total() {
        let (env, clean) = desk();
        let set = TrajectorySet::new(clean.clone());
        let cfg = RepairConfig { parts: 3, ..RepairConfig::default() };
        let chis = vec![simple_chi(); 3];
        let out = repair_options(&env, &clean, &set.demonstrations(), &chis, &cfg).unwrap();
        for i in 0..2 {
            for s in &out.options[i].termination {
                let t = out.chain.get(i, *s).expect("every termination state is mapped");
                assert!(out.options[i + 1].initiation.contains(&t));
            }
        }
    }

    #[test]
    fn single_option_matches_plain_rollout() {
        let (env, clean) = desk();
        let set = TrajectorySet::new(clean.clone());
        let cfg = RepairConfig { parts: 1, ..RepairConfig::default() };
        let out = repair_options(&env, &clean, &set.demonstrations(), &[simple_chi()], &cfg).unwrap();
        for s in env.top_row_starts() {
            let (_, chained) = chain_options(s, &out.options, &out.chain, &env, 0.2, 32).unwrap();
            let plain = rollout(&env, &out.options[0].policy, s, 32).unwrap();
            assert_eq!(chained.steps, plain.steps);
        }
    }

    #[test]
    fn tiny_budget_fails() {
        let (env, clean) = desk();
        let set = TrajectorySet::new(clean.clone());
        let out = repair_options(&env, &clean, &set.demonstrations(), &[simple_chi()], &RepairConfig { parts: 1, ..Default::default() }).unwrap();
        let (outcome, t) = chain_options(GridState::new(4, 7), &out.options, &out.chain, &env, 0.2, 1).unwrap();
        assert_eq!(outcome, TaskOutcome::Failure);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn match_prefers_closer_part() {
        let mk = |x: f64| {
            let steps = vec![Step {
                state: GridState::new(0, 1),
                action: GridAction::Noop,
                reward: x,
                observation: Observation::new(x, 0.0),
            }];
            split_steps(0, &steps, 1).unwrap().remove(0)
        };
        let (demo, near, far) = (mk(0.0), mk(0.2), mk(0.8));
        assert_eq!(match_clean_part(&demo, &[&far, &near]).unwrap(), &near);
        assert_eq!(match_clean_part(&demo, &[&far]).unwrap(), &far);
    }

    #[test]
    fn override_rescues_high_return_reject() {
        let (env, clean) = desk();
        // A classifier that rejects everything.
        let mut data = vec![LabeledFeature {
            features: DivergenceFeatures { oc: 100.0, fd: 100.0 },
            label: Decision::Accept,
        }];
        for k in 0..5 {
            data.push(LabeledFeature {
                features: DivergenceFeatures { oc: k as f64, fd: 0.0 },
                label: Decision::Reject,
            });
        }
        let reject_all = train_chi(&data).unwrap();
        let set = TrajectorySet::new(clean.clone());
        let cfg = RepairConfig::default();
        let chis = vec![reject_all; 2];
        let out = repair_options(&env, &clean, &set.demonstrations(), &chis, &cfg).unwrap();
        assert!(out.decisions.iter().all(|d| d.reason == Reason::ReturnRatioOverride));
        let off = RepairConfig { use_override: false, ..cfg };
        let out = repair_options(&env, &clean, &set.demonstrations(), &chis, &off).unwrap();
        assert!(out.decisions.iter().all(|d| d.reason == Reason::Reject));
        let per = index_decisions(&out.decisions, 2);
        assert!(per.iter().all(|d| d.decision == Decision::Reject));
    }

    #[test]
    fn report_counts_and_csv() {
        let pv = PolicyValue::from_returns(vec![1.0, 2.0]);
        let d = |index, reason| PartDecision {
            parent: 0,
            index,
            features: DivergenceFeatures { oc: 0.0, fd: 0.0 },
            predicted: Decision::Reject,
            reason,
            demo_return: 0.0,
            clean_return: 0.0,
            steps: 3,
        };
        let ds = vec![
            d(0, Reason::ReturnRatioOverride),
            d(0, Reason::ReturnRatioOverride),
            d(1, Reason::Reject),
            d(1, Reason::ClassifierAccept),
        ];
        let r = report(pv.clone(), pv.clone(), &ds, 2);
        assert_eq!(r.counts.total(), ds.len());
        assert_eq!(r.per_index[0].to_string(), "Acc*");
        assert_eq!(r.per_index[1].to_string(), "Rej");
        assert_eq!(r.pre, r.post);
        let row = ReportRow::from_report(0, "END", 0.6, 0.3, &r, &r);
        let mut buf = Vec::new();
        write_report_rows(std::slice::from_ref(&row), &mut buf).unwrap();
        assert_eq!(read_report_rows(buf.as_slice()).unwrap(), vec![row]);
    }
}
