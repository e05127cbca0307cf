//! GridLander: a deterministic, gravity-driven landing task on a small grid.
//!
//! The lander starts somewhere above the ground row and every action except
//! `Main` drops it by one row. Touching the ground row on a pad column lands
//! (`r_land`); touching it anywhere else crashes (`r_crash`). Engine use costs
//! `c_main` / `c_side` per step, and an optional `r_descent` is paid for every
//! row descended.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imitation::Policy;
use crate::trajectories::{Provenance, Step, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridState {
    pub x: usize,
    pub y: usize,
}

impl GridState {
    pub const fn new(x: usize, y: usize) -> Self {
        GridState { x, y }
    }

    pub fn is_terminal(&self) -> bool {
        self.y == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GridAction {
    Noop,
    Main,
    Left,
    Right,
}

impl GridAction {
    /// Fixed tie-break order used everywhere an arg-max over actions is taken.
    pub const ALL: [GridAction; 4] = [
        GridAction::Noop,
        GridAction::Main,
        GridAction::Left,
        GridAction::Right,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            GridAction::Noop => "NOOP",
            GridAction::Main => "MAIN",
            GridAction::Left => "LEFT",
            GridAction::Right => "RIGHT",
        }
    }
}

impl fmt::Display for GridAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GridAction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NOOP" => Ok(GridAction::Noop),
            "MAIN" => Ok(GridAction::Main),
            "LEFT" => Ok(GridAction::Left),
            "RIGHT" => Ok(GridAction::Right),
            other => Err(Error::InvalidArgument(format!("unknown action {other:?}"))),
        }
    }
}

/// Continuous embedding `(x / W, y / H)` of a grid state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub x: f64,
    pub y: f64,
}

impl Observation {
    pub fn new(x: f64, y: f64) -> Self {
        Observation { x, y }
    }

    pub fn dist(&self, other: &Observation) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridLanderEnv {
    pub width: usize,
    pub height: usize,
    pub pad: BTreeSet<usize>,
    pub gamma: f64,
    pub r_land: f64,
    pub r_crash: f64,
    pub c_main: f64,
    pub c_side: f64,
    /// Paid once per row descended. Zero keeps rewards purely terminal plus engine costs.
    pub r_descent: f64,
    /// Sharpness of the smooth landing surrogate used by gradient attacks.
    pub kappa: f64,
}

impl Default for GridLanderEnv {
    fn default() -> Self {
        GridLanderEnv {
            width: 10,
            height: 8,
            pad: BTreeSet::from([4, 5]),
            gamma: 0.99,
            r_land: 320.0,
            r_crash: -100.0,
            c_main: -0.3,
            c_side: -0.03,
            r_descent: 0.0,
            kappa: 25.0,
        }
    }
}

impl GridLanderEnv {
    pub fn new(width: usize, height: usize, pad: impl IntoIterator<Item = usize>) -> Result<Self> {
        let env = GridLanderEnv {
            width,
            height,
            pad: pad.into_iter().collect(),
            ..Default::default()
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height < 2 {
            return Err(Error::InvalidConfig(format!(
                "grid must be at least 1x2, got {}x{}",
                self.width, self.height
            )));
        }
        if self.pad.is_empty() {
            return Err(Error::InvalidConfig("pad must be non-empty".into()));
        }
        if let Some(&p) = self.pad.iter().find(|&&p| p >= self.width) {
            return Err(Error::InvalidConfig(format!(
                "pad column {p} outside width {}",
                self.width
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        let finite = [
            self.r_land,
            self.r_crash,
            self.c_main,
            self.c_side,
            self.r_descent,
            self.kappa,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("reward constants must be finite".into()));
        }
        Ok(())
    }

    pub fn contains(&self, s: GridState) -> bool {
        s.x < self.width && s.y < self.height
    }

    fn check(&self, s: GridState) -> Result<()> {
        if self.contains(s) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                state: s,
                width: self.width,
                height: self.height,
            })
        }
    }

    /// Successor under the deterministic dynamics, without reward or terminal checks.
    pub fn successor(&self, s: GridState, a: GridAction) -> GridState {
        let x = match a {
            GridAction::Left => s.x.saturating_sub(1),
            GridAction::Right => (s.x + 1).min(self.width - 1),
            _ => s.x,
        };
        let y = match a {
            GridAction::Main => s.y,
            _ => s.y.saturating_sub(1),
        };
        GridState { x, y }
    }

    pub fn action_cost(&self, a: GridAction) -> f64 {
        match a {
            GridAction::Noop => 0.0,
            GridAction::Main => self.c_main,
            GridAction::Left | GridAction::Right => self.c_side,
        }
    }

    fn descent_reward(&self, a: GridAction) -> f64 {
        match a {
            GridAction::Main => 0.0,
            _ => self.r_descent,
        }
    }

    pub fn step(&self, s: GridState, a: GridAction) -> Result<(GridState, f64)> {
        self.check(s)?;
        if s.is_terminal() {
            return Err(Error::TerminalStep(s));
        }
        let next = self.successor(s, a);
        let mut reward = self.action_cost(a) + self.descent_reward(a);
        if next.is_terminal() {
            reward += if self.pad.contains(&next.x) {
                self.r_land
            } else {
                self.r_crash
            };
        }
        Ok((next, reward))
    }

    pub fn observe(&self, s: GridState) -> Observation {
        Observation {
            x: s.x as f64 / self.width as f64,
            y: s.y as f64 / self.height as f64,
        }
    }

    /// Landed on a pad column.
    pub fn is_goal(&self, s: GridState) -> bool {
        s.is_terminal() && self.pad.contains(&s.x)
    }

    pub fn states(&self) -> impl Iterator<Item = GridState> + '_ {
        (0..self.width).flat_map(move |x| (0..self.height).map(move |y| GridState { x, y }))
    }

    /// Every non-terminal cell of the top row, left to right.
    pub fn top_row_starts(&self) -> Vec<GridState> {
        (0..self.width)
            .map(|x| GridState::new(x, self.height - 1))
            .collect()
    }

    /// Episode cap used for evaluation and chaining.
    pub fn default_t_max(&self) -> usize {
        4 * self.height
    }

    /// Smooth surrogate of the landing reward over continuous observations:
    /// action terms plus `r_land * (1 - o.y) * exp(-kappa * d^2)`, where `d`
    /// is the distance to the nearest pad cell on the ground row.
    pub fn reward_of_observation(&self, o: Observation, a: GridAction) -> f64 {
        let d2 = self
            .pad
            .iter()
            .map(|&p| {
                let dx = o.x - p as f64 / self.width as f64;
                dx * dx + o.y * o.y
            })
            .fold(f64::INFINITY, f64::min);
        self.action_cost(a)
            + self.descent_reward(a)
            + self.r_land * (1.0 - o.y) * (-self.kappa * d2).exp()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn to_config_string(&self) -> String {
        let pad = self
            .pad
            .iter()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "width = {}\nheight = {}\npad = {}\ngamma = {}\nr_land = {}\nr_crash = {}\nc_main = {}\nc_side = {}\nr_descent = {}\nkappa = {}\n",
            self.width,
            self.height,
            pad,
            self.gamma,
            self.r_land,
            self.r_crash,
            self.c_main,
            self.c_side,
            self.r_descent,
            self.kappa
        )
    }
}

/// Flat `key = value` lines; `#` starts a comment. Unset keys keep their defaults.
impl FromStr for GridLanderEnv {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut env = GridLanderEnv::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(line_no, format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let real = || -> Result<f64> {
                value
                    .parse::<f64>()
                    .map_err(|e| Error::parse(line_no, format!("{key}: {e}")))
            };
            let int = || -> Result<usize> {
                value
                    .parse::<usize>()
                    .map_err(|e| Error::parse(line_no, format!("{key}: {e}")))
            };
            match key {
                "width" => env.width = int()?,
                "height" => env.height = int()?,
                "pad" => {
                    env.pad = value
                        .split(',')
                        .map(|p| {
                            p.trim()
                                .parse::<usize>()
                                .map_err(|e| Error::parse(line_no, format!("pad: {e}")))
                        })
                        .collect::<Result<_>>()?
                }
                "gamma" => env.gamma = real()?,
                "r_land" => env.r_land = real()?,
                "r_crash" => env.r_crash = real()?,
                "c_main" => env.c_main = real()?,
                "c_side" => env.c_side = real()?,
                "r_descent" => env.r_descent = real()?,
                "kappa" => env.kappa = real()?,
                other => return Err(Error::parse(line_no, format!("unknown key {other:?}"))),
            }
        }
        env.validate()?;
        Ok(env)
    }
}

/// Optimal state values and the greedy policy extracted from them.
#[derive(Debug, Clone)]
pub struct ValueSolution {
    values: Vec<f64>,
    width: usize,
    pub residual: f64,
    pub iterations: usize,
    pub policy: Policy,
}

impl ValueSolution {
    pub fn value(&self, s: GridState) -> f64 {
        self.values[s.y * self.width + s.x]
    }
}

const MAX_SWEEPS: usize = 1_000_000;

fn q_value(env: &GridLanderEnv, values: &[f64], s: GridState, a: GridAction) -> f64 {
    let (next, r) = env
        .step(s, a)
        .expect("q_value is only evaluated on in-grid non-terminal states");
    r + env.gamma * values[next.y * env.width + next.x]
}

/// Synchronous value iteration to a Bellman residual below `tol`.
pub fn solve_values(env: &GridLanderEnv, tol: f64) -> Result<ValueSolution> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("tol must be > 0, got {tol}")));
    }
    env.validate()?;
    let n = env.width * env.height;
    let mut values = vec![0.0; n];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while residual >= tol && iterations < MAX_SWEEPS {
        let mut next = values.clone();
        residual = 0.0;
        for s in env.states().filter(|s| !s.is_terminal()) {
            let best = GridAction::ALL
                .iter()
                .map(|&a| q_value(env, &values, s, a))
                .fold(f64::NEG_INFINITY, f64::max);
            let i = s.y * env.width + s.x;
            residual = residual.max((best - values[i]).abs());
            next[i] = best;
        }
        values = next;
        iterations += 1;
    }

    let mut policy = Policy::empty(env.width, env.height);
    for s in env.states().filter(|s| !s.is_terminal()) {
        let q: Vec<f64> = GridAction::ALL
            .iter()
            .map(|&a| q_value(env, &values, s, a))
            .collect();
        let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-9 * best.abs().max(1.0);
        let a = GridAction::ALL
            .into_iter()
            .zip(&q)
            .find(|(_, &v)| v >= best - slack)
            .map(|(a, _)| a)
            .unwrap_or(GridAction::Noop);
        policy.set_deterministic(s, a);
    }
    Ok(ValueSolution {
        values,
        width: env.width,
        residual,
        iterations,
        policy,
    })
}

pub fn value_iteration(env: &GridLanderEnv, tol: f64) -> Result<Policy> {
    Ok(solve_values(env, tol)?.policy)
}

/// Greedy rollout until a terminal state or `t_max` transitions.
pub fn rollout(env: &GridLanderEnv, pi: &Policy, s0: GridState, t_max: usize) -> Result<Trajectory> {
    if t_max == 0 {
        return Err(Error::InvalidArgument("t_max must be >= 1".into()));
    }
    env.check(s0)?;
    let mut steps = Vec::new();
    let mut s = s0;
    while !s.is_terminal() && steps.len() < t_max {
        let a = pi.greedy(s);
        let (next, reward) = env.step(s, a)?;
        steps.push(Step {
            state: s,
            action: a,
            reward,
            observation: env.observe(s),
        });
        s = next;
    }
    Ok(Trajectory::new(0, steps, Provenance::Clean))
}

/// Replays `actions` from `s0`, stopping early if the ground is reached.
pub fn replay(env: &GridLanderEnv, s0: GridState, actions: &[GridAction]) -> Result<Vec<Step>> {
    let mut steps = Vec::with_capacity(actions.len());
    let mut s = s0;
    for &a in actions {
        if s.is_terminal() {
            break;
        }
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
