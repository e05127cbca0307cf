//! Trajectories, temporal partitioning, and the line-oriented trajectory file format.
//!
//! ```text
//! #set eta=0.6 gamma=0.3
//! #traj id=0 provenance=C
//! 4 7 NOOP 0 0.4 0.875
//! ...
//! #end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::env::{GridAction, GridState, Observation};
use crate::error::{Error, Result};
use crate::imitation::Policy;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: GridState,
    pub action: GridAction,
    pub reward: f64,
    pub observation: Observation,
}

/// Where a trajectory came from. Only evaluation code may look at this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Clean,
    Adversarial,
    Unknown,
}

impl Provenance {
    fn code(self) -> char {
        match self {
            Provenance::Clean => 'C',
            Provenance::Adversarial => 'A',
            Provenance::Unknown => 'U',
        }
    }

    fn from_code(s: &str) -> Option<Self> {
        match s {
            "C" => Some(Provenance::Clean),
            "A" => Some(Provenance::Adversarial),
            "U" => Some(Provenance::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub steps: Vec<Step>,
    pub provenance: Provenance,
}

impl Trajectory {
    pub fn new(id: u64, steps: Vec<Step>, provenance: Provenance) -> Self {
        Trajectory {
            id,
            steps,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.steps.iter().map(|s| s.observation).collect()
    }

    pub fn actions(&self) -> Vec<GridAction> {
        self.steps.iter().map(|s| s.action).collect()
    }

    /// Provenance-free view handed to decision code.
    pub fn demonstration(&self) -> Demonstration<'_> {
        Demonstration {
            id: self.id,
            steps: &self.steps,
        }
    }
}

/// A demonstrated trajectory with its provenance stripped.
#[derive(Debug, Clone, Copy)]
pub struct Demonstration<'a> {
    pub id: u64,
    pub steps: &'a [Step],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub trajectories: Vec<Trajectory>,
    pub eta: f64,
    pub gamma_frac: f64,
}

impl TrajectorySet {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        TrajectorySet {
            trajectories,
            eta: 0.0,
            gamma_frac: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn demonstrations(&self) -> Vec<Demonstration<'_>> {
        self.trajectories.iter().map(Trajectory::demonstration).collect()
    }

    pub fn adversarial_count(&self) -> usize {
        self.trajectories
            .iter()
            .filter(|t| t.provenance == Provenance::Adversarial)
            .count()
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
        let mut out = String::new();
        // `{}` on f64 prints the shortest representation that parses back bit-exactly.
        let _ = writeln!(out, "#set eta={} gamma={}", self.eta, self.gamma_frac);
        for t in &self.trajectories {
            let _ = writeln!(out, "#traj id={} provenance={}", t.id, t.provenance.code());
            for s in &t.steps {
                let _ = writeln!(
                    out,
                    "{} {} {} {} {} {}",
                    s.state.x, s.state.y, s.action, s.reward, s.observation.x, s.observation.y
                );
            }
            out.push_str("#end\n");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut set = TrajectorySet::new(Vec::new());
        let mut seen_header = false;
        // (id, provenance, steps, header line)
        let mut open: Option<(u64, Provenance, Vec<Step>, usize)> = None;

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#set") {
                if seen_header || open.is_some() || !set.trajectories.is_empty() {
                    return Err(Error::parse(line_no, "#set must be the first record"));
                }
                let fields = key_values(rest, line_no)?;
                set.eta = unit_field(&fields, "eta", line_no)?;
                set.gamma_frac = unit_field(&fields, "gamma", line_no)?;
                seen_header = true;
            } else if let Some(rest) = line.strip_prefix("#traj") {
                if let Some((_, _, _, start)) = open {
                    return Err(Error::parse(
                        line_no,
                        format!("trajectory opened at line {start} is missing #end"),
                    ));
                }
                let fields = key_values(rest, line_no)?;
                let id = field(&fields, "id", line_no)?
                    .parse::<u64>()
                    .map_err(|e| Error::parse(line_no, format!("id: {e}")))?;
                let prov = field(&fields, "provenance", line_no)?;
                let prov = Provenance::from_code(prov)
                    .ok_or_else(|| Error::parse(line_no, format!("bad provenance {prov:?}")))?;
                open = Some((id, prov, Vec::new(), line_no));
            } else if line == "#end" {
                let (id, prov, steps, start) = open
                    .take()
                    .ok_or_else(|| Error::parse(line_no, "#end without #traj"))?;
                if steps.is_empty() {
                    return Err(Error::parse(
                        line_no,
                        format!("trajectory opened at line {start} has no steps"),
                    ));
                }
                set.trajectories.push(Trajectory::new(id, steps, prov));
            } else if line.starts_with('#') {
                return Err(Error::parse(line_no, format!("unknown record {line:?}")));
            } else {
                let (_, _, steps, _) = open
                    .as_mut()
                    .ok_or_else(|| Error::parse(line_no, "step outside a trajectory block"))?;
                steps.push(parse_step(line, line_no)?);
            }
        }
        if let Some((_, _, _, start)) = open {
            let last = text.lines().count().max(1);
            return Err(Error::parse(
                last,
                format!("file ends inside trajectory opened at line {start}"),
            ));
        }
        Ok(set)
    }
}

fn key_values(rest: &str, line_no: usize) -> Result<Vec<(&str, &str)>> {
    rest.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| Error::parse(line_no, format!("expected key=value, got {kv:?}")))
        })
        .collect()
}

fn field<'a>(fields: &[(&str, &'a str)], key: &str, line_no: usize) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::parse(line_no, format!("missing {key}")))
}

fn unit_field(fields: &[(&str, &str)], key: &str, line_no: usize) -> Result<f64> {
    let v = field(fields, key, line_no)?
        .parse::<f64>()
        .map_err(|e| Error::parse(line_no, format!("{key}: {e}")))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::parse(line_no, format!("{key} must lie in [0, 1]")));
    }
    Ok(v)
}

fn parse_step(line: &str, line_no: usize) -> Result<Step> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 6 {
        return Err(Error::parse(
            line_no,
            format!("expected 6 fields `x y action reward ox oy`, got {}", toks.len()),
        ));
    }
    let int = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::parse(line_no, format!("{what}: {e}")))
    };
    let real = |s: &str, what: &str| -> Result<f64> {
        let v = s
            .parse::<f64>()
            .map_err(|e| Error::parse(line_no, format!("{what}: {e}")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::parse(line_no, format!("{what} must be finite")))
        }
    };
    Ok(Step {
        state: GridState::new(int(toks[0], "x")?, int(toks[1], "y")?),
        action: toks[2]
            .parse()
            .map_err(|e: Error| Error::parse(line_no, e.to_string()))?,
        reward: real(toks[3], "reward")?,
        observation: Observation::new(real(toks[4], "ox")?, real(toks[5], "oy")?),
    })
}

pub fn trajectory_return(steps: &[Step]) -> f64 {
    steps.iter().map(|s| s.reward).sum()
}

/// One of the `M` contiguous temporal parts of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPart {
    pub parent: u64,
    pub index: usize,
    /// Time index of the first step within the parent.
    pub start: usize,
    pub steps: Vec<Step>,
    /// State the parent occupies right after this part (first state of the next part).
    pub handoff: Option<GridState>,
}

impl TrajectoryPart {
    pub fn observations(&self) -> Vec<Observation> {
        self.steps.iter().map(|s| s.observation).collect()
    }

    pub fn ret(&self) -> f64 {
        trajectory_return(&self.steps)
    }

    pub fn first_state(&self) -> GridState {
        self.steps[0].state
    }

    /// Handoff state when known, else the last recorded state.
    pub fn end_state(&self) -> GridState {
        self.handoff
            .unwrap_or_else(|| self.steps[self.steps.len() - 1].state)
    }
}

/// Part lengths for splitting `len` steps into `m` parts, remainder to the earliest parts.
pub fn part_lengths(len: usize, m: usize) -> Vec<usize> {
    let (base, rem) = (len / m, len % m);
    (0..m).map(|i| base + usize::from(i < rem)).collect()
}

pub fn split_steps(id: u64, steps: &[Step], m: usize) -> Result<Vec<TrajectoryPart>> {
    if m == 0 || m > steps.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split a length-{} trajectory into {m} parts",
            steps.len()
        )));
    }
    let mut parts = Vec::with_capacity(m);
    let mut start = 0;
    for (index, len) in part_lengths(steps.len(), m).into_iter().enumerate() {
        let end = start + len;
        parts.push(TrajectoryPart {
            parent: id,
            index,
            start,
            steps: steps[start..end].to_vec(),
            handoff: steps.get(end).map(|s| s.state),
        });
        start = end;
    }
    Ok(parts)
}

pub fn split(t: &Trajectory, m: usize) -> Result<Vec<TrajectoryPart>> {
    split_steps(t.id, &t.steps, m)
}

/// Fraction of steps whose action differs from the clean policy's greedy choice.
pub fn measure_gamma(t: &Trajectory, clean: &Policy) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    let changed = t
        .steps
        .iter()
        .filter(|s| s.action != clean.greedy(s.state))
        .count();
    changed as f64 / t.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy(len: usize) -> Trajectory {
        let steps = (0..len)
            .map(|k| Step {
                state: GridState::new(k, len - k),
                action: GridAction::Noop,
                reward: k as f64,
                observation: Observation::new(0.0, 0.0),
            })
            .collect();
        Trajectory::new(3, steps, Provenance::Unknown)
    }

    #[test]
    fn split_examples() {
        let lens = |t: &Trajectory, m| {
            split(t, m)
                .unwrap()
                .iter()
                .map(|p| p.steps.len())
                .collect::<Vec<_>>()
        };
        assert_eq!(lens(&dummy(6), 2), vec![3, 3]);
        assert_eq!(lens(&dummy(7), 3), vec![3, 2, 2]);
        let whole = split(&dummy(5), 1).unwrap();
        assert_eq!(whole[0].steps, dummy(5).steps);
        assert_eq!(whole[0].handoff, None);
    }

    #[test]
    fn split_rejects_too_many_parts() {
        assert!(split(&dummy(3), 4).is_err());
        assert!(split(&dummy(3), 0).is_err());
    }

    #[test]
    fn handoff_is_next_parts_first_state() {
        let parts = split(&dummy(7), 3).unwrap();
        assert_eq!(parts[0].handoff, Some(parts[1].first_state()));
        assert_eq!(parts[1].handoff, Some(parts[2].first_state()));
        assert_eq!(parts[1].start, 3);
    }

    #[test]
    fn returns() {
        assert_eq!(trajectory_return(&dummy(4).steps), 6.0);
        assert_eq!(trajectory_return(&dummy(1).steps), 0.0);
    }

    #[test]
    fn empty_set_round_trips() {
        let set = TrajectorySet::new(Vec::new());
        assert_eq!(TrajectorySet::parse(&set.to_text()).unwrap(), set);
    }

    #[test]
    fn truncated_file_names_line() {
        let mut set = TrajectorySet::new(vec![dummy(3)]);
        set.eta = 0.5;
        let text = set.to_text();
        let cut: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        let err = TrajectorySet::parse(&cut).unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 4);
                assert!(msg.contains("line 2"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_step_names_line() {
        let text = "#set eta=0 gamma=0\n#traj id=1 provenance=C\n1 2 NOOP 0 0.1\n#end\n";
        assert!(matches!(
            TrajectorySet::parse(text),
            Err(Error::Parse { line: 3, .. })
        ));
        let text = "#traj id=1 provenance=X\n";
        assert!(matches!(
            TrajectorySet::parse(text),
            Err(Error::Parse { line: 1, .. })
        ));
        let text = "#traj id=1 provenance=C\n1 2 JUMP 0 0.1 0.2\n#end\n";
        assert!(matches!(
            TrajectorySet::parse(text),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
