//! Divergence of a demonstrated (part-)trajectory from clean behavior:
//! discounted occupancy overlap and discrete Fréchet distance.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::env::{GridState, Observation};
use crate::error::{Error, Result};
use crate::imitation::{behavior_clone, Policy};
use crate::trajectories::{Step, Trajectory, TrajectoryPart};

/// Clean-policy statistics the occupancy measure is computed against.
#[derive(Debug, Clone)]
pub struct CleanReference {
    pub policy: Policy,
    visits: HashMap<(GridState, usize), f64>,
    pub gamma: f64,
}

impl CleanReference {
    /// Empirical `pi_clean(a|s)`; zero at states the clean data never visits.
    pub fn policy_prob(&self, s: GridState, a: crate::env::GridAction) -> f64 {
        self.policy.stored(s).map_or(0.0, |p| p[a.index()])
    }

    /// Fraction of clean trajectories whose `t`-th state is `s`.
    pub fn visit(&self, s: GridState, t: usize) -> f64 {
        self.visits.get(&(s, t)).copied().unwrap_or(0.0)
    }
}

pub fn build_reference(clean: &[Trajectory], gamma: f64) -> Result<CleanReference> {
    if clean.is_empty() {
        return Err(Error::Empty("clean reference needs at least one trajectory"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0,1], got {gamma}")));
    }
    let (w, h) = clean
        .iter()
        .flat_map(|t| &t.steps)
        .fold((1, 1), |(w, h), s| (w.max(s.state.x + 1), h.max(s.state.y + 1)));
    let policy = behavior_clone(clean.iter().map(|t| t.steps.as_slice()), w, h)?;
    let n = clean.len() as f64;
    let mut visits = HashMap::new();
    for t in clean {
        for (k, s) in t.steps.iter().enumerate() {
            *visits.entry((s.state, k)).or_insert(0.0) += 1.0 / n;
        }
    }
    Ok(CleanReference {
        policy,
        visits,
        gamma,
    })
}

/// Occupancy overlap of `steps`, whose first step sits at absolute time `t0`.
///
/// Each demonstrated pair contributes `pi_clean(a|s) * sum_{k=0}^{len} gamma^k * p(s at t0+k)`.
pub fn occupancy_measure_at(steps: &[Step], t0: usize, r: &CleanReference) -> f64 {
    steps
        .iter()
        .map(|s| {
            let p = r.policy_prob(s.state, s.action);
            if p == 0.0 {
                return 0.0;
            }
            let mut discount = 1.0;
            let mut acc = 0.0;
            for k in 0..=steps.len() {
                acc += discount * r.visit(s.state, t0 + k);
                discount *= r.gamma;
            }
            p * acc
        })
        .sum()
}

pub fn occupancy_measure(steps: &[Step], r: &CleanReference) -> f64 {
    occupancy_measure_at(steps, 0, r)
}

/// Discrete Fréchet distance between two polylines. Empty input yields infinity.
pub fn frechet_distance(p: &[Observation], q: &[Observation]) -> f64 {
    if p.is_empty() || q.is_empty() {
        return f64::INFINITY;
    }
    let m = q.len();
    let mut prev = vec![0.0_f64; m];
    let mut cur = vec![0.0_f64; m];
    for (i, a) in p.iter().enumerate() {
        for (j, b) in q.iter().enumerate() {
            let d = a.dist(b);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceFeatures {
    pub oc: f64,
    pub fd: f64,
}

impl DivergenceFeatures {
    pub fn as_array(&self) -> [f64; 2] {
        [self.oc, self.fd]
    }
}

/// Features of one part against clean parts sharing its index.
pub fn features(part: &TrajectoryPart, clean_parts: &[&TrajectoryPart], r: &CleanReference) -> DivergenceFeatures {
    let obs = part.observations();
    let fd = clean_parts
        .iter()
        .map(|c| frechet_distance(&obs, &c.observations()))
        .fold(f64::INFINITY, f64::min);
    DivergenceFeatures {
        oc: occupancy_measure_at(&part.steps, part.start, r),
        fd: if fd.is_finite() { fd } else { 0.0 },
    }
}

/// Index of the clean part closest in Fréchet distance (first on ties).
pub fn nearest_clean(part: &TrajectoryPart, clean_parts: &[&TrajectoryPart]) -> Option<usize> {
    let obs = part.observations();
    let mut best: Option<(f64, usize)> = None;
    for (i, c) in clean_parts.iter().enumerate() {
        let d = frechet_distance(&obs, &c.observations());
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

/// One row of the exported feature table. `label` is `true` for Accept.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub traj_id: u64,
    pub part_idx: usize,
    pub oc: f64,
    pub fd: f64,
    pub label: Option<bool>,
}

const HEADER: [&str; 5] = ["traj_id", "part_idx", "oc", "fd", "label"];

pub fn write_features<W: Write>(rows: &[FeatureRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        let label = match r.label {
            Some(true) => "Acc",
            Some(false) => "Rej",
            None => "",
        };
        w.write_record([
            r.traj_id.to_string(),
            r.part_idx.to_string(),
            r.oc.to_string(),
            r.fd.to_string(),
            label.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<features>", e))?;
    Ok(())
}

pub fn read_features<R: Read>(input: R) -> Result<Vec<FeatureRow>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rd.headers()?.clone();
    if header.iter().ne(HEADER) {
        return Err(Error::parse(1, format!("expected header {}", HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != HEADER.len() {
            return Err(Error::parse(line, format!("expected {} fields", HEADER.len())));
        }
        let real = |k: usize| -> Result<f64> {
            let v: f64 = rec[k]
                .parse()
                .map_err(|e| Error::parse(line, format!("{}: {e}", HEADER[k])))?;
            if v.is_finite() && v >= 0.0 {
                Ok(v)
            } else {
                Err(Error::parse(line, format!("{} must be finite and >= 0", HEADER[k])))
            }
        };
        rows.push(FeatureRow {
            traj_id: rec[0]
                .parse()
                .map_err(|e| Error::parse(line, format!("traj_id: {e}")))?,
            part_idx: rec[1]
                .parse()
                .map_err(|e| Error::parse(line, format!("part_idx: {e}")))?,
            oc: real(2)?,
            fd: real(3)?,
            label: match &rec[4] {
                "Acc" => Some(true),
                "Rej" => Some(false),
                "" => None,
                other => return Err(Error::parse(line, format!("bad label {other:?}"))),
            },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{rollout, value_iteration, GridAction, GridLanderEnv};
    use crate::trajectories::{split, Provenance};

    fn obs(v: &[(f64, f64)]) -> Vec<Observation> {
        v.iter().map(|&(x, y)| Observation::new(x, y)).collect()
    }

    fn walk(states: &[(usize, usize)], a: GridAction) -> Trajectory {
        let steps = states
            .iter()
            .map(|&(x, y)| Step {
                state: GridState::new(x, y),
                action: a,
                reward: 0.0,
                observation: Observation::new(x as f64, y as f64),
            })
            .collect();
        Trajectory::new(0, steps, Provenance::Clean)
    }

    #[test]
    fn frechet_examples() {
        let p = obs(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let q = obs(&[(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)]);
        assert_eq!(frechet_distance(&p, &p), 0.0);
        assert_eq!(frechet_distance(&p, &q), 1.0);
    }

    #[test]
    fn reference_statistics() {
        let a = walk(&[(1, 3), (1, 2)], GridAction::Noop);
        let b = walk(&[(1, 3), (2, 2)], GridAction::Right);
        let r = build_reference(std::slice::from_ref(&a), 0.99).unwrap();
        assert_eq!(r.policy_prob(GridState::new(1, 3), GridAction::Noop), 1.0);
        let r = build_reference(&[a, b], 0.99).unwrap();
        assert_eq!(r.visit(GridState::new(1, 3), 0), 1.0);
        assert_eq!(r.visit(GridState::new(1, 2), 1), 0.5);
        assert_eq!(r.visit(GridState::new(2, 2), 1), 0.5);
        assert!(build_reference(&[], 0.99).is_err());
    }

    #[test]
    fn occupancy_example() {
        let t = walk(&[(1, 3), (1, 2), (1, 1)], GridAction::Noop);
        let r = build_reference(std::slice::from_ref(&t), 0.99).unwrap();
        assert!((occupancy_measure(&t.steps, &r) - 2.9701).abs() < 1e-12);
    }

    #[test]
    fn occupancy_zero_cases() {
        let t = walk(&[(1, 3), (1, 2), (1, 1)], GridAction::Noop);
        let r = build_reference(&[t], 0.99).unwrap();
        let elsewhere = walk(&[(3, 3), (3, 2)], GridAction::Noop);
        assert_eq!(occupancy_measure(&elsewhere.steps, &r), 0.0);
        let wrong_actions = walk(&[(1, 3), (1, 2)], GridAction::Left);
        assert_eq!(occupancy_measure(&wrong_actions.steps, &r), 0.0);
    }

    #[test]
    fn verbatim_part_has_zero_fd() {
        let env = GridLanderEnv::default();
        let pi = value_iteration(&env, 1e-9).unwrap();
        let t = rollout(&env, &pi, GridState::new(0, 7), 32).unwrap();
        let r = build_reference(std::slice::from_ref(&t), env.gamma).unwrap();
        let parts = split(&t, 2).unwrap();
        let f = features(&parts[1], &[&parts[1]], &r);
        assert_eq!(f.fd, 0.0);
        assert!(f.oc > 0.0);
    }

    #[test]
    fn features_csv_round_trip() {
        let rows = vec![
            FeatureRow { traj_id: 3, part_idx: 1, oc: 2.5, fd: 0.125, label: Some(true) },
            FeatureRow { traj_id: 4, part_idx: 0, oc: 0.0, fd: 0.1 + 0.2, label: None },
        ];
        let mut buf = Vec::new();
        write_features(&rows, &mut buf).unwrap();
        assert_eq!(read_features(buf.as_slice()).unwrap(), rows);
        let bad = "traj_id,part_idx,oc,fd,label\n1,0,x,0,Acc\n";
        assert!(matches!(read_features(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }
}
