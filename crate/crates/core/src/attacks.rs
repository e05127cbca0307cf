//! Adversarial demonstration tampering: directed action replacement at the
//! beginning, middle, or end of a trajectory, and gradient-guided action swaps.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{replay, GridAction, GridLanderEnv, GridState, Observation};
use crate::error::{Error, Result};
use crate::trajectories::{Provenance, Step, Trajectory, TrajectorySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Beg,
    Mid,
    End,
    Flp,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::Beg, AttackKind::Mid, AttackKind::End, AttackKind::Flp];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Beg => "BEG",
            AttackKind::Mid => "MID",
            AttackKind::End => "END",
            AttackKind::Flp => "FLP",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attack kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub eta: f64,
    pub gamma_frac: f64,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, eta: f64, gamma_frac: f64, seed: u64) -> Result<Self> {
        for (name, v) in [("eta", eta), ("gamma", gamma_frac)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        Ok(AttackSpec {
            kind,
            eta,
            gamma_frac,
            seed,
        })
    }

    /// Number of trajectories attacked out of `n`.
    pub fn attacked_count(&self, n: usize) -> usize {
        ((self.eta * n as f64 + 1e-9).floor() as usize).min(n)
    }

    /// Length of the modified run (or swap iterations) for a length-`len` trajectory.
    pub fn budget(&self, len: usize) -> usize {
        ((self.gamma_frac * len as f64 - 1e-9).ceil().max(0.0) as usize).min(len)
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "kind={},eta={},gamma={},seed={}",
            self.kind, self.eta, self.gamma_frac, self.seed
        )
    }
}

/// Parses `kind=END,eta=0.6,gamma=0.3,seed=7`; `seed` defaults to 0.
impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mut kind, mut eta, mut gamma, mut seed) = (None, None, None, 0);
        for kv in s.split(',').map(str::trim).filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got {kv:?}")))?;
            let real = || {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("{k}: {e}")))
            };
            match k.trim() {
                "kind" => kind = Some(v.trim().parse()?),
                "eta" => eta = Some(real()?),
                "gamma" => gamma = Some(real()?),
                "seed" => {
                    seed = v
                        .trim()
                        .parse()
                        .map_err(|e| Error::InvalidArgument(format!("seed: {e}")))?
                }
                other => return Err(Error::InvalidArgument(format!("unknown attack key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::InvalidArgument(format!("attack spec is missing {k}"));
        AttackSpec::new(
            kind.ok_or_else(|| missing("kind"))?,
            eta.ok_or_else(|| missing("eta"))?,
            gamma.ok_or_else(|| missing("gamma"))?,
            seed,
        )
    }
}

/// Action whose successor from `s` lands farthest (in observation space) from `clean_next`.
/// Ties go to the earliest action in NOOP, MAIN, LEFT, RIGHT order.
pub fn phi(env: &GridLanderEnv, s: GridState, clean_next: GridState) -> GridAction {
    let target = env.observe(clean_next);
    let mut best = (f64::NEG_INFINITY, GridAction::Noop);
    for a in GridAction::ALL {
        let d = env.observe(env.successor(s, a)).dist(&target);
        if d > best.0 {
            best = (d, a);
        }
    }
    best.1
}

fn pick_targets(n: usize, spec: &AttackSpec) -> BTreeSet<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rand::seq::index::sample(&mut rng, n, spec.attacked_count(n))
        .into_iter()
        .collect()
}

/// First index of the modified run for a directed attack.
pub fn directed_start(kind: AttackKind, len: usize, k: usize) -> usize {
    match kind {
        AttackKind::Beg | AttackKind::Flp => 0,
        AttackKind::Mid => (len - k) / 2,
        AttackKind::End => len - k,
    }
}

/// Re-simulates `t`, replacing actions at indices in `window` by `phi`.
fn directed_one(env: &GridLanderEnv, t: &Trajectory, window: std::ops::Range<usize>) -> Result<Vec<Step>> {
    let mut steps = Vec::with_capacity(t.len());
    let mut s = t.steps[0].state;
    for (j, orig) in t.steps.iter().enumerate() {
        if s.is_terminal() {
            break;
        }
        let a = if window.contains(&j) {
            phi(env, s, env.successor(s, orig.action))
        } else {
            orig.action
        };
        let (next, reward) = env.step(s, a)?;
        steps.push(Step {
            state: s,
            action: a,
            reward,
            observation: env.observe(s),
        });
        s = next;
    }
    Ok(steps)
}

pub fn directed_attack(clean: &TrajectorySet, spec: &AttackSpec, env: &GridLanderEnv) -> Result<TrajectorySet> {
    if spec.kind == AttackKind::Flp {
        return Err(Error::InvalidArgument("directed attack needs kind BEG, MID, or END".into()));
    }
    if clean.is_empty() {
        return Err(Error::Empty("attack needs at least one trajectory"));
    }
    let targets = pick_targets(clean.len(), spec);
    let mut out = Vec::with_capacity(clean.len());
    for (i, t) in clean.trajectories.iter().enumerate() {
        if !targets.contains(&i) {
            out.push(t.clone());
            continue;
        }
        let k = spec.budget(t.len());
        let start = directed_start(spec.kind, t.len(), k);
        let steps = directed_one(env, t, start..start + k)?;
        out.push(Trajectory::new(t.id, steps, Provenance::Adversarial));
    }
    Ok(TrajectorySet {
        trajectories: out,
        eta: spec.eta,
        gamma_frac: spec.gamma_frac,
    })
}

pub const GRADIENT_STEP: f64 = 1e-4;

/// `|d r / d o|` at `(o, a)` by central differences on the surrogate reward.
pub fn reward_gradient_norm(env: &GridLanderEnv, o: Observation, a: GridAction) -> f64 {
    let h = GRADIENT_STEP;
    let r = |x: f64, y: f64| env.reward_of_observation(Observation::new(x, y), a);
    let gx = (r(o.x + h, o.y) - r(o.x - h, o.y)) / (2.0 * h);
    let gy = (r(o.x, o.y + h) - r(o.x, o.y - h)) / (2.0 * h);
    gx.hypot(gy)
}

/// Index pairs swapped by the gradient attack, in iteration order.
///
/// Each iteration takes the smallest remaining gradient (lowest index on ties)
/// and the largest (highest index on ties); swapped indices are not reused.
pub fn flip_pairs(gradients: &[f64], iterations: usize) -> Vec<(usize, usize)> {
    let mut free: BTreeSet<usize> = (0..gradients.len()).collect();
    let mut pairs = Vec::new();
    for _ in 0..iterations {
        if free.len() < 2 {
            break;
        }
        let lo = *free
            .iter()
            .min_by(|&&a, &&b| gradients[a].total_cmp(&gradients[b]).then(a.cmp(&b)))
            .expect("at least two free indices");
        let hi = *free
            .iter()
            .filter(|&&j| j != lo)
            .max_by(|&&a, &&b| gradients[a].total_cmp(&gradients[b]).then(a.cmp(&b)))
            .expect("at least one other free index");
        free.remove(&lo);
        free.remove(&hi);
        pairs.push((lo, hi));
    }
    pairs
}

pub fn gradient_attack(clean: &TrajectorySet, spec: &AttackSpec, env: &GridLanderEnv) -> Result<TrajectorySet> {
    if spec.kind != AttackKind::Flp {
        return Err(Error::InvalidArgument("gradient attack needs kind FLP".into()));
    }
    if clean.is_empty() {
        return Err(Error::Empty("attack needs at least one trajectory"));
    }
    let targets = pick_targets(clean.len(), spec);
    let mut out = Vec::with_capacity(clean.len());
    for (i, t) in clean.trajectories.iter().enumerate() {
        if !targets.contains(&i) {
            out.push(t.clone());
            continue;
        }
        if t.len() < 2 {
            log::warn!("trajectory {} has {} step(s); nothing to swap", t.id, t.len());
            out.push(Trajectory::new(t.id, t.steps.clone(), Provenance::Adversarial));
            continue;
        }
        let grads: Vec<f64> = t
            .steps
            .iter()
            .map(|s| reward_gradient_norm(env, s.observation, s.action))
            .collect();
        let mut actions = t.actions();
        for (lo, hi) in flip_pairs(&grads, spec.budget(t.len())) {
            actions.swap(lo, hi);
        }
        let steps = replay(env, t.steps[0].state, &actions)?;
        out.push(Trajectory::new(t.id, steps, Provenance::Adversarial));
    }
    Ok(TrajectorySet {
        trajectories: out,
        eta: spec.eta,
        gamma_frac: spec.gamma_frac,
    })
}

pub fn attack(clean: &TrajectorySet, spec: &AttackSpec, env: &GridLanderEnv) -> Result<TrajectorySet> {
    match spec.kind {
        AttackKind::Flp => gradient_attack(clean, spec, env),
        _ => directed_attack(clean, spec, env),
    }
}
