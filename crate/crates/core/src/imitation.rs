//! Tabular behavior cloning and rollout evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::env::{rollout, GridAction, GridLanderEnv, GridState, Observation};
use crate::error::{Error, Result};
use crate::trajectories::Step;

/// State to action-distribution table with a nearest-visited-state fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub width: usize,
    pub height: usize,
    table: BTreeMap<GridState, [f64; 4]>,
}

impl Policy {
    pub fn empty(width: usize, height: usize) -> Self {
        Policy {
            width,
            height,
            table: BTreeMap::new(),
        }
    }

    pub fn set_deterministic(&mut self, s: GridState, a: GridAction) {
        let mut p = [0.0; 4];
        p[a.index()] = 1.0;
        self.table.insert(s, p);
    }

    pub fn set_probs(&mut self, s: GridState, probs: [f64; 4]) -> Result<()> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "action probabilities at {s:?} must be in [0,1] and sum to 1, got {probs:?}"
            )));
        }
        self.table.insert(s, probs);
        Ok(())
    }

    pub fn visited(&self) -> impl Iterator<Item = (&GridState, &[f64; 4])> {
        self.table.iter()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn stored(&self, s: GridState) -> Option<&[f64; 4]> {
        self.table.get(&s)
    }

    fn observe(&self, s: GridState) -> Observation {
        Observation::new(
            s.x as f64 / self.width.max(1) as f64,
            s.y as f64 / self.height.max(1) as f64,
        )
    }

    /// Nearest visited state by observation distance; ties go to the smaller state.
    pub fn nearest_visited(&self, s: GridState) -> Option<GridState> {
        if self.table.contains_key(&s) {
            return Some(s);
        }
        let o = self.observe(s);
        let mut best: Option<(f64, GridState)> = None;
        // BTreeMap iterates in ascending state order, so strict `<` keeps the first tie.
        for &v in self.table.keys() {
            let d = o.dist(&self.observe(v));
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, v));
            }
        }
        best.map(|(_, v)| v)
    }

    /// Action distribution at `s`, falling back to the nearest visited state.
    /// An empty policy answers NOOP with certainty.
    pub fn probs(&self, s: GridState) -> [f64; 4] {
        match self.nearest_visited(s) {
            Some(v) => self.table[&v],
            None => [1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn prob(&self, s: GridState, a: GridAction) -> f64 {
        self.probs(s)[a.index()]
    }

    pub fn greedy(&self, s: GridState) -> GridAction {
        greedy_of(&self.probs(s))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#policy width={} height={}\n", self.width, self.height);
        for (s, p) in &self.table {
            let _ = writeln!(out, "{} {} {} {} {} {}", s.x, s.y, p[0], p[1], p[2], p[3]);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut policy: Option<Policy> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#policy") {
                if policy.is_some() {
                    return Err(Error::parse(line_no, "duplicate #policy header"));
                }
                let mut dims = [None, None];
                for kv in rest.split_whitespace() {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::parse(line_no, format!("expected key=value, got {kv:?}")))?;
                    let slot = match k {
                        "width" => &mut dims[0],
                        "height" => &mut dims[1],
                        _ => return Err(Error::parse(line_no, format!("unknown key {k:?}"))),
                    };
                    let n = v
                        .parse::<usize>()
                        .map_err(|e| Error::parse(line_no, format!("{k}: {e}")))?;
                    if n == 0 {
                        return Err(Error::parse(line_no, format!("{k} must be >= 1")));
                    }
                    *slot = Some(n);
                }
                match dims {
                    [Some(w), Some(h)] => policy = Some(Policy::empty(w, h)),
                    _ => return Err(Error::parse(line_no, "header needs width and height")),
                }
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let p = policy
                .as_mut()
                .ok_or_else(|| Error::parse(line_no, "row before #policy header"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 6 {
                return Err(Error::parse(
                    line_no,
                    format!("expected `x y p_noop p_main p_left p_right`, got {} fields", toks.len()),
                ));
            }
            let x = toks[0]
                .parse::<usize>()
                .map_err(|e| Error::parse(line_no, format!("x: {e}")))?;
            let y = toks[1]
                .parse::<usize>()
                .map_err(|e| Error::parse(line_no, format!("y: {e}")))?;
            if x >= p.width || y >= p.height {
                return Err(Error::parse(line_no, format!("state ({x},{y}) outside grid")));
            }
            let mut probs = [0.0; 4];
            for (slot, tok) in probs.iter_mut().zip(&toks[2..]) {
                *slot = tok
                    .parse::<f64>()
                    .map_err(|e| Error::parse(line_no, format!("probability: {e}")))?;
            }
            p.set_probs(GridState::new(x, y), probs)
                .map_err(|e| Error::parse(line_no, e.to_string()))?;
        }
        policy.ok_or_else(|| Error::parse(1, "missing #policy header"))
    }
}

/// Arg max with ties to the earliest action in NOOP, MAIN, LEFT, RIGHT order.
pub fn greedy_of(p: &[f64; 4]) -> GridAction {
    let mut best = 0;
    for i in 1..4 {
        if p[i] > p[best] {
            best = i;
        }
    }
    GridAction::ALL[best]
}

/// Empirical action frequencies per visited state.
pub fn behavior_clone<'a, I>(train: I, width: usize, height: usize) -> Result<Policy>
where
    I: IntoIterator<Item = &'a [Step]>,
{
    let mut counts: BTreeMap<GridState, [u64; 4]> = BTreeMap::new();
    for steps in train {
        for s in steps {
            counts.entry(s.state).or_default()[s.action.index()] += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Empty("behavior cloning needs at least one step"));
    }
    let mut policy = Policy::empty(width, height);
    for (s, c) in counts {
        let total = c.iter().sum::<u64>() as f64;
        policy.table.insert(s, c.map(|n| n as f64 / total));
    }
    Ok(policy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValue {
    pub mean_return: f64,
    pub episodes: usize,
    pub returns: Vec<f64>,
}

impl PolicyValue {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let mean_return = if returns.is_empty() {
            0.0
        } else {
            returns.iter().sum::<f64>() / returns.len() as f64
        };
        PolicyValue {
            mean_return,
            episodes: returns.len(),
            returns,
        }
    }

    pub fn median(&self) -> f64 {
        median(&self.returns)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// One greedy rollout per start state.
pub fn evaluate(pi: &Policy, env: &GridLanderEnv, starts: &[GridState], t_max: usize) -> Result<PolicyValue> {
    if starts.is_empty() {
        return Err(Error::Empty("evaluation needs at least one start state"));
    }
    let returns = starts
        .iter()
        .map(|&s| Ok(rollout(env, pi, s, t_max)?.steps.iter().map(|s| s.reward).sum()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(PolicyValue::from_returns(returns))
}

pub fn value_ratio(
    pi: &Policy,
    pi_ref: &Policy,
    env: &GridLanderEnv,
    starts: &[GridState],
    t_max: usize,
) -> Result<f64> {
    let reference = evaluate(pi_ref, env, starts, t_max)?.mean_return;
    if reference == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(evaluate(pi, env, starts, t_max)?.mean_return / reference)
}
