//! Seeded benchmark harness: generate clean demonstrations, attack them over a
//! grid of (kind, eta, gamma), repair, learn, evaluate, and write CSV tables.
//!
//! Every cell writes its own rows and artifacts under `cells/`; the top-level
//! tables are the cell files concatenated in grid order, so a resumed run and a
//! fresh run produce the same bytes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attacks::{attack, AttackKind, AttackSpec};
use crate::classifier::{label, score_predictions, train_chi, Chi, Decision, LabeledFeature};
use crate::divergence::{write_features, FeatureRow};
use crate::env::{rollout, value_iteration, GridLanderEnv, GridState};
use crate::error::{Error, Result};
use crate::imitation::{behavior_clone, evaluate, median, Policy, PolicyValue};
use crate::repair::{
    default_eps_chain, evaluate_options, options_from_parts, repair_with_index, report, CleanIndex, ReportRow,
    RepairConfig, RepairOutcome, RepairReport, REPORT_HEADER,
};
use crate::trajectories::{split, split_steps, Step, TrajectoryPart, TrajectorySet};

/// Benchmark environment: the default grid with a per-row descent bonus so that
/// early parts of a trajectory carry positive return.
pub fn desk_env() -> GridLanderEnv {
    GridLanderEnv {
        r_descent: 10.0,
        ..GridLanderEnv::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env_path: Option<PathBuf>,
    pub env: GridLanderEnv,
    pub n_clean: usize,
    pub kinds: Vec<AttackKind>,
    pub etas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub parts: Vec<usize>,
    pub eps_p: f64,
    pub eps_chain: Option<f64>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub use_override: bool,
    pub use_options: bool,
    /// Run a single attack instead of the grid; its seed drives the attack directly.
    pub fixed_attack: Option<AttackSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env_path: None,
            env: desk_env(),
            n_clean: 100,
            kinds: AttackKind::ALL.to_vec(),
            etas: vec![0.3, 0.6, 0.9],
            gammas: vec![0.3, 0.6, 0.9],
            parts: vec![1, 2, 3],
            eps_p: 0.1,
            eps_chain: None,
            seeds: vec![0, 1, 2],
            out: PathBuf::from("results"),
            use_override: true,
            use_options: true,
            fixed_attack: None,
        }
    }
}

fn list<T: FromStr>(value: &str, key: &str, line: usize) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|e| Error::parse(line, format!("{key}: {e}"))))
        .collect()
}

fn flag(value: &str, key: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => Err(Error::parse(line, format!("{key}: expected true or false"))),
    }
}

/// Flat `key = value` lines, `#` comments, comma-separated lists. The `env`
/// path is recorded but not read; see [`ExperimentConfig::load`].
impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::parse(line, format!("expected key = value, got {body:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let real = || value.parse::<f64>().map_err(|e| Error::parse(line, format!("{key}: {e}")));
            match key {
                "env" => cfg.env_path = Some(PathBuf::from(value)),
                "n_clean" => {
                    cfg.n_clean = value
                        .parse()
                        .map_err(|e| Error::parse(line, format!("{key}: {e}")))?
                }
                "kinds" => cfg.kinds = list(value, key, line)?,
                "etas" => cfg.etas = list(value, key, line)?,
                "gammas" => cfg.gammas = list(value, key, line)?,
                "parts" => cfg.parts = list(value, key, line)?,
                "seeds" => cfg.seeds = list(value, key, line)?,
                "eps_p" => cfg.eps_p = real()?,
                "eps_chain" => cfg.eps_chain = Some(real()?),
                "out" => cfg.out = PathBuf::from(value),
                "override" => cfg.use_override = flag(value, key, line)?,
                "options" => cfg.use_options = flag(value, key, line)?,
                "attack" => {
                    cfg.fixed_attack = Some(
                        value
                            .parse()
                            .map_err(|e: Error| Error::parse(line, e.to_string()))?,
                    )
                }
                other => return Err(Error::parse(line, format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    /// Parses `path` and loads the environment file it names, relative to the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = text.parse()?;
        if let Some(env_path) = &cfg.env_path {
            let resolved = match path.parent() {
                Some(dir) if env_path.is_relative() => dir.join(env_path),
                _ => env_path.clone(),
            };
            cfg.env = GridLanderEnv::load(&resolved)?;
            cfg.env_path = Some(resolved);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_clean == 0 {
            return bad("n_clean must be >= 1".into());
        }
        if self.fixed_attack.is_none() && (self.kinds.is_empty() || self.etas.is_empty() || self.gammas.is_empty()) {
            return bad("attack grid is empty".into());
        }
        if let Some(v) = self.etas.iter().chain(&self.gammas).find(|v| !(0.0..=1.0).contains(*v)) {
            return bad(format!("fractions must lie in [0,1], got {v}"));
        }
        if self.parts.is_empty() || self.parts.contains(&0) {
            return bad("parts must be a non-empty list of positive integers".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(0.0..1.0).contains(&self.eps_p) {
            return bad(format!("eps_p must lie in [0,1), got {}", self.eps_p));
        }
        if let Some(e) = self.eps_chain {
            if !(e >= 0.0 && e.is_finite()) {
                return bad(format!("eps_chain must be finite and >= 0, got {e}"));
            }
        }
        self.env.validate()
    }

    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let mut out = String::new();
        if let Some(p) = &self.env_path {
            let _ = writeln!(out, "env = {}", p.display());
        }
        let _ = writeln!(out, "n_clean = {}", self.n_clean);
        let _ = writeln!(out, "kinds = {}", join(self.kinds.iter().map(ToString::to_string).collect()));
        let _ = writeln!(out, "etas = {}", join(self.etas.iter().map(ToString::to_string).collect()));
        let _ = writeln!(out, "gammas = {}", join(self.gammas.iter().map(ToString::to_string).collect()));
        let _ = writeln!(out, "parts = {}", join(self.parts.iter().map(ToString::to_string).collect()));
        let _ = writeln!(out, "seeds = {}", join(self.seeds.iter().map(ToString::to_string).collect()));
        let _ = writeln!(out, "eps_p = {}", self.eps_p);
        if let Some(e) = self.eps_chain {
            let _ = writeln!(out, "eps_chain = {e}");
        }
        let _ = writeln!(out, "out = {}", self.out.display());
        let _ = writeln!(out, "override = {}", self.use_override);
        let _ = writeln!(out, "options = {}", self.use_options);
        if let Some(a) = &self.fixed_attack {
            let _ = writeln!(out, "attack = {a}");
        }
        out
    }

    /// The (kind, eta, gamma) grid in output order.
    pub fn grid(&self) -> Vec<(AttackKind, f64, f64)> {
        let mut cells = Vec::new();
        for &kind in &self.kinds {
            for &eta in &self.etas {
                for &gamma in &self.gammas {
                    cells.push((kind, eta, gamma));
                }
            }
        }
        cells
    }
}

/// Configured part counts with 1 prepended when absent.
pub fn granularities(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut g = cfg.parts.clone();
    if !g.contains(&1) {
        g.insert(0, 1);
    }
    g
}

const STREAM_ATTACK: u64 = 1;
const STREAM_POOL: u64 = 2;
const STREAM_TEST: u64 = 3;

/// Independent sub-seed for (`base`, `stream`, `index`).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

/// Clean rollouts from top-row starts taken in turn.
pub fn clean_set(env: &GridLanderEnv, expert: &Policy, n: usize) -> Result<TrajectorySet> {
    let starts = env.top_row_starts();
    let t_max = env.default_t_max();
    let trajectories = (0..n)
        .map(|i| {
            let mut t = rollout(env, expert, starts[i % starts.len()], t_max)?;
            t.id = i as u64;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectorySet::new(trajectories))
}

/// Shared per-run state: environment, expert, clean data, and the clean reference value.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub env: GridLanderEnv,
    pub expert: Policy,
    pub clean: TrajectorySet,
    pub clean_clone: Policy,
    pub clean_value: PolicyValue,
    pub starts: Vec<GridState>,
    pub t_max: usize,
    pub eps_chain: f64,
    pub indexes: Vec<(usize, CleanIndex)>,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let env = cfg.env.clone();
        let expert = value_iteration(&env, 1e-9)?;
        let clean = clean_set(&env, &expert, cfg.n_clean)?;
        let clean_clone = behavior_clone(clean.trajectories.iter().map(|t| t.steps.as_slice()), env.width, env.height)?;
        let starts = env.top_row_starts();
        let t_max = env.default_t_max();
        let clean_value = evaluate(&clean_clone, &env, &starts, t_max)?;
        let eps_chain = cfg.eps_chain.unwrap_or_else(|| default_eps_chain(&env));
        // Whole-trajectory judgements are always reported, so M = 1 is always indexed.
        let indexes = granularities(cfg)
            .into_iter()
            .map(|m| Ok((m, CleanIndex::new(&env, &clean.trajectories, m)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            cfg: cfg.clone(),
            env,
            expert,
            clean,
            clean_clone,
            clean_value,
            starts,
            t_max,
            eps_chain,
            indexes,
        })
    }

    pub fn clean_index(&self, m: usize) -> &CleanIndex {
        &self
            .indexes
            .iter()
            .find(|(k, _)| *k == m)
            .expect("clean index exists for every configured part count")
            .1
    }

    /// Labeled part features of every trajectory in `set`, grouped by part index.
    pub fn labeled_parts(&self, set: &TrajectorySet, m: usize) -> Result<Vec<Vec<(u64, LabeledFeature)>>> {
        let index = self.clean_index(m);
        let mut out = vec![Vec::new(); m];
        for t in set.trajectories.iter().filter(|t| t.len() >= m) {
            for p in split(t, m)? {
                let features = index.features(&p);
                let l = label(p.ret(), index.r_max(p.index), self.cfg.eps_p)?;
                out[p.index].push((t.id, LabeledFeature { features, label: l }));
            }
        }
        Ok(out)
    }

    /// Labeled parts over the full default attack grid, attacked with seeds from
    /// `stream`. The classifier's training mix does not depend on which cells are evaluated.
    fn grid_samples(&self, seed: u64, stream: u64, m: usize) -> Result<Vec<Vec<(u64, LabeledFeature)>>> {
        let mut out = vec![Vec::new(); m];
        for (c, (kind, eta, gamma)) in ExperimentConfig::default().grid().into_iter().enumerate() {
            let spec = AttackSpec::new(kind, eta, gamma, derive_seed(seed, stream, c as u64))?;
            let set = attack(&self.clean, &spec, &self.env)?;
            for (i, rows) in self.labeled_parts(&set, m)?.into_iter().enumerate() {
                out[i].extend(rows);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierRow {
    pub seed: u64,
    pub parts: usize,
    /// Part index, or `None` for all indices pooled.
    pub index: Option<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub false_negative_rate: f64,
}

pub struct TrainedChis {
    pub seed: u64,
    pub parts: usize,
    pub chis: Vec<Chi>,
    pub rows: Vec<ClassifierRow>,
    pub train: Vec<Vec<(u64, LabeledFeature)>>,
}

/// Trains one classifier per part index on a pool drawn over the attack grid and
/// scores it on a held-out draw.
pub fn train_classifiers(prep: &Prepared, seed: u64, m: usize) -> Result<TrainedChis> {
    let train = prep.grid_samples(seed, STREAM_POOL, m)?;
    let test = prep.grid_samples(seed, STREAM_TEST, m)?;
    let mut chis = Vec::with_capacity(m);
    let mut rows = Vec::new();
    let mut all_preds = Vec::new();
    let mut all_test = Vec::new();
    let mut n_train = 0;
    for i in 0..m {
        let data: Vec<LabeledFeature> = train[i].iter().map(|(_, f)| *f).collect();
        let chi = train_chi(&data)?;
        let held: Vec<LabeledFeature> = test[i].iter().map(|(_, f)| *f).collect();
        let preds: Vec<Decision> = held.iter().map(|f| chi.predict(&f.features)).collect();
        let s = score_predictions(&preds, &held)?;
        rows.push(ClassifierRow {
            seed,
            parts: m,
            index: Some(i),
            n_train: data.len(),
            n_test: held.len(),
            accuracy: s.accuracy,
            f1: s.f1,
            false_negative_rate: s.false_negative_rate,
        });
        n_train += data.len();
        all_preds.extend(preds);
        all_test.extend(held);
        chis.push(chi);
    }
    let s = score_predictions(&all_preds, &all_test)?;
    rows.push(ClassifierRow {
        seed,
        parts: m,
        index: None,
        n_train,
        n_test: all_test.len(),
        accuracy: s.accuracy,
        f1: s.f1,
        false_negative_rate: s.false_negative_rate,
    });
    Ok(TrainedChis {
        seed,
        parts: m,
        chis,
        rows,
        train,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct H1Row {
    pub seed: u64,
    pub kind: String,
    pub eta: f64,
    pub gamma: f64,
    pub clean_mean: f64,
    pub demo_mean: f64,
    pub demo_median: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverrideRow {
    pub seed: u64,
    pub kind: String,
    pub eta: f64,
    pub gamma: f64,
    pub parts: usize,
    pub n_parts: usize,
    /// Demo parts whose accept/reject outcome changes when the override is disabled.
    pub part_flips: usize,
    /// Per-index table decisions that change when the override is disabled.
    pub index_flips: usize,
    pub post_with: f64,
    pub post_without: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptionsRow {
    pub seed: u64,
    pub kind: String,
    pub eta: f64,
    pub gamma: f64,
    pub parts: usize,
    pub pre_options: f64,
    pub pre_monolithic: f64,
    pub pre_delta: f64,
    pub post_options: f64,
    pub post_monolithic: f64,
    pub post_delta: f64,
}

/// A fixed-column CSV record.
pub trait CsvRow: Sized {
    const HEADER: &'static [&'static str];
    fn record(&self) -> Vec<String>;
    fn from_record(rec: &csv::StringRecord, line: usize) -> Result<Self>;
}

fn field<T: FromStr>(rec: &csv::StringRecord, k: usize, name: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    rec.get(k)
        .ok_or_else(|| Error::parse(line, format!("missing {name}")))?
        .parse()
        .map_err(|e| Error::parse(line, format!("{name}: {e}")))
}

impl CsvRow for ReportRow {
    const HEADER: &'static [&'static str] = &REPORT_HEADER;

    fn record(&self) -> Vec<String> {
        ReportRow::record(self).to_vec()
    }

    fn from_record(rec: &csv::StringRecord, line: usize) -> Result<Self> {
        Ok(ReportRow {
            seed: field(rec, 0, "seed", line)?,
            parts: field(rec, 1, "parts", line)?,
            loc: field(rec, 2, "loc", line)?,
            eta: field(rec, 3, "eta", line)?,
            gamma: field(rec, 4, "gamma", line)?,
            full_dec: field(rec, 5, "full_dec", line)?,
            part_decs: field::<String>(rec, 6, "part_decs", line)?
                .split('/')
                .map(str::to_string)
                .collect(),
            pre_median: field(rec, 7, "pre_median", line)?,
            pre_mean: field(rec, 8, "pre_mean", line)?,
            post_median: field(rec, 9, "post_median", line)?,
            post_mean: field(rec, 10, "post_mean", line)?,
            steps_used: field(rec, 11, "steps_used", line)?,
            full_steps_used: field(rec, 12, "full_steps_used", line)?,
        })
    }
}

impl CsvRow for H1Row {
    const HEADER: &'static [&'static str] =
        &["seed", "kind", "eta", "gamma", "clean_mean", "demo_mean", "demo_median"];

    fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.kind.clone(),
            self.eta.to_string(),
            self.gamma.to_string(),
            self.clean_mean.to_string(),
            self.demo_mean.to_string(),
            self.demo_median.to_string(),
        ]
    }

    fn from_record(rec: &csv::StringRecord, line: usize) -> Result<Self> {
        Ok(H1Row {
            seed: field(rec, 0, "seed", line)?,
            kind: field(rec, 1, "kind", line)?,
            eta: field(rec, 2, "eta", line)?,
            gamma: field(rec, 3, "gamma", line)?,
            clean_mean: field(rec, 4, "clean_mean", line)?,
            demo_mean: field(rec, 5, "demo_mean", line)?,
            demo_median: field(rec, 6, "demo_median", line)?,
        })
    }
}

impl CsvRow for OverrideRow {
    const HEADER: &'static [&'static str] = &[
        "seed",
        "kind",
        "eta",
        "gamma",
        "parts",
        "n_parts",
        "part_flips",
        "index_flips",
        "post_with",
        "post_without",
        "delta",
    ];

    fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.kind.clone(),
            self.eta.to_string(),
            self.gamma.to_string(),
            self.parts.to_string(),
            self.n_parts.to_string(),
            self.part_flips.to_string(),
            self.index_flips.to_string(),
            self.post_with.to_string(),
            self.post_without.to_string(),
            self.delta.to_string(),
        ]
    }

    fn from_record(rec: &csv::StringRecord, line: usize) -> Result<Self> {
        Ok(OverrideRow {
            seed: field(rec, 0, "seed", line)?,
            kind: field(rec, 1, "kind", line)?,
            eta: field(rec, 2, "eta", line)?,
            gamma: field(rec, 3, "gamma", line)?,
            parts: field(rec, 4, "parts", line)?,
            n_parts: field(rec, 5, "n_parts", line)?,
            part_flips: field(rec, 6, "part_flips", line)?,
            index_flips: field(rec, 7, "index_flips", line)?,
            post_with: field(rec, 8, "post_with", line)?,
            post_without: field(rec, 9, "post_without", line)?,
            delta: field(rec, 10, "delta", line)?,
        })
    }
}

impl CsvRow for OptionsRow {
    const HEADER: &'static [&'static str] = &[
        "seed",
        "kind",
        "eta",
        "gamma",
        "parts",
        "pre_options",
        "pre_monolithic",
        "pre_delta",
        "post_options",
        "post_monolithic",
        "post_delta",
    ];

    fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.kind.clone(),
            self.eta.to_string(),
            self.gamma.to_string(),
            self.parts.to_string(),
            self.pre_options.to_string(),
            self.pre_monolithic.to_string(),
            self.pre_delta.to_string(),
            self.post_options.to_string(),
            self.post_monolithic.to_string(),
            self.post_delta.to_string(),
        ]
    }

    fn from_record(rec: &csv::StringRecord, line: usize) -> Result<Self> {
        Ok(OptionsRow {
            seed: field(rec, 0, "seed", line)?,
            kind: field(rec, 1, "kind", line)?,
            eta: field(rec, 2, "eta", line)?,
            gamma: field(rec, 3, "gamma", line)?,
            parts: field(rec, 4, "parts", line)?,
            pre_options: field(rec, 5, "pre_options", line)?,
            pre_monolithic: field(rec, 6, "pre_monolithic", line)?,
            pre_delta: field(rec, 7, "pre_delta", line)?,
            post_options: field(rec, 8, "post_options", line)?,
            post_monolithic: field(rec, 9, "post_monolithic", line)?,
            post_delta: field(rec, 10, "post_delta", line)?,
        })
    }
}

impl CsvRow for ClassifierRow {
    const HEADER: &'static [&'static str] = &[
        "seed",
        "parts",
        "index",
        "n_train",
        "n_test",
        "accuracy",
        "f1",
        "false_negative_rate",
    ];

    fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.parts.to_string(),
            self.index.map_or_else(|| "all".to_string(), |i| i.to_string()),
            self.n_train.to_string(),
            self.n_test.to_string(),
            self.accuracy.to_string(),
            self.f1.to_string(),
            self.false_negative_rate.to_string(),
        ]
    }

    fn from_record(rec: &csv::StringRecord, line: usize) -> Result<Self> {
        let index: String = field(rec, 2, "index", line)?;
        Ok(ClassifierRow {
            seed: field(rec, 0, "seed", line)?,
            parts: field(rec, 1, "parts", line)?,
            index: if index == "all" {
                None
            } else {
                Some(index.parse().map_err(|e| Error::parse(line, format!("index: {e}")))?)
            },
            n_train: field(rec, 3, "n_train", line)?,
            n_test: field(rec, 4, "n_test", line)?,
            accuracy: field(rec, 5, "accuracy", line)?,
            f1: field(rec, 6, "f1", line)?,
            false_negative_rate: field(rec, 7, "false_negative_rate", line)?,
        })
    }
}

pub fn rows_to_csv<R: CsvRow>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(R::HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv<R: CsvRow>(text: &str) -> Result<Vec<R>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    if rd.headers()?.iter().ne(R::HEADER.iter().copied()) {
        return Err(Error::parse(1, format!("expected header {}", R::HEADER.join(","))));
    }
    rd.records()
        .enumerate()
        .map(|(i, rec)| R::from_record(&rec?, i + 2))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellResult {
    pub table: Vec<ReportRow>,
    pub h1: Vec<H1Row>,
    pub overrides: Vec<OverrideRow>,
    pub options: Vec<OptionsRow>,
}

/// One attack cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub seed: u64,
    pub spec: AttackSpec,
}

impl Cell {
    pub fn key(&self) -> String {
        format!(
            "s{}/{}_{}_{}",
            self.seed, self.spec.kind, self.spec.eta, self.spec.gamma_frac
        )
    }
}

pub fn cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    if let Some(spec) = cfg.fixed_attack {
        return Ok(cfg.seeds.iter().map(|&seed| Cell { seed, spec }).collect());
    }
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for (c, (kind, eta, gamma)) in cfg.grid().into_iter().enumerate() {
            let spec = AttackSpec::new(kind, eta, gamma, derive_seed(seed, STREAM_ATTACK, c as u64))?;
            out.push(Cell { seed, spec });
        }
    }
    Ok(out)
}

fn steps_of<'a>(parts: impl IntoIterator<Item = &'a TrajectoryPart>) -> Vec<&'a [Step]> {
    parts.into_iter().map(|p| p.steps.as_slice()).collect()
}

fn value_of_clone(prep: &Prepared, data: &[&[Step]]) -> Result<PolicyValue> {
    let pi = behavior_clone(data.iter().copied(), prep.env.width, prep.env.height)?;
    evaluate(&pi, &prep.env, &prep.starts, prep.t_max)
}

/// Value of the repaired learner: chained options, or one clone of the repaired data.
fn post_value(prep: &Prepared, m: usize, outcome: &RepairOutcome, demo: &TrajectorySet, options: bool) -> Result<PolicyValue> {
    if options {
        return evaluate_options(&outcome.options, &outcome.chain, &prep.env, &prep.starts, prep.eps_chain, prep.t_max);
    }
    value_of_clone(prep, &repaired_union(prep, m, outcome, demo)?)
}

/// Clean parts plus the demo parts the repair accepted, as step slices.
fn repaired_union<'a>(prep: &'a Prepared, m: usize, outcome: &RepairOutcome, demo: &'a TrajectorySet) -> Result<Vec<&'a [Step]>> {
    let index = prep.clean_index(m);
    let accepted: BTreeSet<(u64, usize)> = outcome
        .decisions
        .iter()
        .filter(|d| d.reason.decision() == Decision::Accept)
        .map(|d| (d.parent, d.index))
        .collect();
    let mut data: Vec<&[Step]> = (0..m).flat_map(|i| steps_of(index.clean_parts(i))).collect();
    for t in demo.trajectories.iter().filter(|t| t.len() >= m) {
        let lens = crate::trajectories::part_lengths(t.len(), m);
        let mut start = 0;
        for (i, len) in lens.into_iter().enumerate() {
            if accepted.contains(&(t.id, i)) {
                data.push(&t.steps[start..start + len]);
            }
            start += len;
        }
    }
    Ok(data)
}

pub struct CellArtifacts {
    pub demo: TrajectorySet,
    pub features: Vec<(usize, Vec<FeatureRow>)>,
    pub policies: Vec<(usize, Vec<Policy>)>,
}

pub fn run_cell(prep: &Prepared, chis: &[TrainedChis], cell: &Cell) -> Result<(CellResult, CellArtifacts)> {
    let cfg = &prep.cfg;
    let demo = attack(&prep.clean, &cell.spec, &prep.env)?;
    let demos = demo.demonstrations();
    let kind = cell.spec.kind.to_string();
    let (eta, gamma) = (cell.spec.eta, cell.spec.gamma_frac);
    let chis_for = |m: usize| -> Result<&[Chi]> {
        chis.iter()
            .find(|c| c.seed == cell.seed && c.parts == m)
            .map(|c| c.chis.as_slice())
            .ok_or_else(|| Error::InvalidArgument(format!("no classifiers for seed {} and {m} parts", cell.seed)))
    };

    let demo_steps: Vec<&[Step]> = demo.trajectories.iter().map(|t| t.steps.as_slice()).collect();
    let pre = value_of_clone(prep, &demo_steps)?;
    let mut result = CellResult::default();
    result.h1.push(H1Row {
        seed: cell.seed,
        kind: kind.clone(),
        eta,
        gamma,
        clean_mean: prep.clean_value.mean_return,
        demo_mean: pre.mean_return,
        demo_median: median(&pre.returns),
    });

    let full_cfg = RepairConfig {
        parts: 1,
        eps_p: cfg.eps_p,
        use_override: cfg.use_override,
    };
    let full = repair_with_index(&prep.env, prep.clean_index(1), &demos, chis_for(1)?, &full_cfg)?;
    let full_report = report(pre.clone(), pre.clone(), &full.decisions, 1);

    let mut artifacts = CellArtifacts {
        demo: demo.clone(),
        features: Vec::new(),
        policies: Vec::new(),
    };
    for &m in &cfg.parts {
        let index = prep.clean_index(m);
        let chis_m = chis_for(m)?;
        let on = RepairConfig {
            parts: m,
            eps_p: cfg.eps_p,
            use_override: true,
        };
        let off = RepairConfig { use_override: false, ..on };
        let with = repair_with_index(&prep.env, index, &demos, chis_m, &on)?;
        let without = repair_with_index(&prep.env, index, &demos, chis_m, &off)?;
        let chosen = if cfg.use_override { &with } else { &without };

        let post = post_value(prep, m, chosen, &demo, cfg.use_options)?;
        let rep: RepairReport = report(pre.clone(), post.clone(), &chosen.decisions, m);
        result
            .table
            .push(ReportRow::from_report(cell.seed, &kind, eta, gamma, &full_report, &rep));

        let post_with = post_value(prep, m, &with, &demo, true)?;
        let post_without = post_value(prep, m, &without, &demo, true)?;
        let rep_with = report(pre.clone(), post_with.clone(), &with.decisions, m);
        let rep_without = report(pre.clone(), post_without.clone(), &without.decisions, m);
        let part_flips = with
            .decisions
            .iter()
            .zip(&without.decisions)
            .filter(|(a, b)| a.reason.decision() != b.reason.decision())
            .count();
        let index_flips = rep_with
            .per_index
            .iter()
            .zip(&rep_without.per_index)
            .filter(|(a, b)| a.decision != b.decision)
            .count();
        result.overrides.push(OverrideRow {
            seed: cell.seed,
            kind: kind.clone(),
            eta,
            gamma,
            parts: m,
            n_parts: with.decisions.len(),
            part_flips,
            index_flips,
            post_with: post_with.mean_return,
            post_without: post_without.mean_return,
            delta: post_with.mean_return - post_without.mean_return,
        });

        // Options against one monolithic clone of the same data: the raw demonstrations
        // before repair, the repaired union after.
        let demo_parts: Vec<TrajectoryPart> = demo
            .trajectories
            .iter()
            .filter(|t| t.len() >= m)
            .map(|t| split_steps(t.id, &t.steps, m))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let mut unfiltered: Vec<Vec<&TrajectoryPart>> = vec![Vec::new(); m];
        for p in &demo_parts {
            unfiltered[p.index].push(p);
        }
        let (pre_opts, pre_chain) = options_from_parts(&prep.env, &unfiltered)?;
        let pre_options = evaluate_options(&pre_opts, &pre_chain, &prep.env, &prep.starts, prep.eps_chain, prep.t_max)?;
        let pre_mono = value_of_clone(prep, &steps_of(demo_parts.iter()))?;
        let post_mono = value_of_clone(prep, &repaired_union(prep, m, chosen, &demo)?)?;
        let post_opts = evaluate_options(&chosen.options, &chosen.chain, &prep.env, &prep.starts, prep.eps_chain, prep.t_max)?;
        result.options.push(OptionsRow {
            seed: cell.seed,
            kind: kind.clone(),
            eta,
            gamma,
            parts: m,
            pre_options: pre_options.mean_return,
            pre_monolithic: pre_mono.mean_return,
            pre_delta: pre_options.mean_return - pre_mono.mean_return,
            post_options: post_opts.mean_return,
            post_monolithic: post_mono.mean_return,
            post_delta: post_opts.mean_return - post_mono.mean_return,
        });

        artifacts.features.push((
            m,
            chosen
                .decisions
                .iter()
                .map(|d| FeatureRow {
                    traj_id: d.parent,
                    part_idx: d.index,
                    oc: d.features.oc,
                    fd: d.features.fd,
                    label: Some(d.reason.decision() == Decision::Accept),
                })
                .collect(),
        ));
        artifacts
            .policies
            .push((m, chosen.options.iter().map(|o| o.policy.clone()).collect()));
    }
    Ok((result, artifacts))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

const TABLE: &str = "table.csv";
const H1: &str = "h1_rewards.csv";
const OVERRIDE: &str = "ablation_override.csv";
const OPTIONS: &str = "ablation_options.csv";
const CLASSIFIER: &str = "classifier.csv";
const MANIFEST: &str = "manifest.txt";

fn cell_dir(out: &Path, cell: &Cell) -> PathBuf {
    out.join("cells").join(cell.key())
}

fn save_cell(out: &Path, cell: &Cell, r: &CellResult, a: &CellArtifacts) -> Result<()> {
    let dir = cell_dir(out, cell);
    write(&dir.join(TABLE), rows_to_csv(&r.table)?)?;
    write(&dir.join(H1), rows_to_csv(&r.h1)?)?;
    write(&dir.join(OVERRIDE), rows_to_csv(&r.overrides)?)?;
    write(&dir.join(OPTIONS), rows_to_csv(&r.options)?)?;
    write(&dir.join("demo.traj"), a.demo.to_text())?;
    for (m, rows) in &a.features {
        let mut buf = Vec::new();
        write_features(rows, &mut buf)?;
        write(&dir.join(format!("features_m{m}.csv")), buf)?;
    }
    for (m, policies) in &a.policies {
        for (i, p) in policies.iter().enumerate() {
            write(&dir.join(format!("policy_m{m}_option{i}.txt")), p.to_text())?;
        }
    }
    Ok(())
}

fn load_cell(out: &Path, cell: &Cell) -> Result<CellResult> {
    let dir = cell_dir(out, cell);
    Ok(CellResult {
        table: rows_from_csv(&read(&dir.join(TABLE))?)?,
        h1: rows_from_csv(&read(&dir.join(H1))?)?,
        overrides: rows_from_csv(&read(&dir.join(OVERRIDE))?)?,
        options: rows_from_csv(&read(&dir.join(OPTIONS))?)?,
    })
}

fn read_manifest(out: &Path) -> BTreeSet<String> {
    std::fs::read_to_string(out.join(MANIFEST))
        .map(|t| {
            t.lines()
                .filter_map(|l| l.strip_prefix("done "))
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentResults {
    pub clean_mean: f64,
    pub clean_median: f64,
    pub table: Vec<ReportRow>,
    pub h1: Vec<H1Row>,
    pub overrides: Vec<OverrideRow>,
    pub options: Vec<OptionsRow>,
    pub classifier: Vec<ClassifierRow>,
}

/// Runs the full grid, writing per-cell files and the concatenated tables under `cfg.out`.
///
/// With `resume`, cells listed as done in an existing manifest are read back
/// instead of recomputed.
pub fn run_experiment(cfg: &ExperimentConfig, resume: bool) -> Result<ExperimentResults> {
    let prep = Prepared::new(cfg)?;
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join("config.txt"), cfg.to_text())?;
    write(&out.join("env.cfg"), prep.env.to_config_string())?;
    write(&out.join("clean.traj"), prep.clean.to_text())?;
    write(&out.join("expert_policy.txt"), prep.expert.to_text())?;

    let prep = &prep;
    let ms = granularities(cfg);
    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| ms.iter().map(move |&m| (s, m)))
        .collect();
    let trained: Vec<TrainedChis> = jobs
        .par_iter()
        .map(|&(s, m)| train_classifiers(prep, s, m))
        .collect::<Result<_>>()?;
    for t in &trained {
        for (i, chi) in t.chis.iter().enumerate() {
            write(&out.join("models").join(format!("s{}_m{}_part{i}.chi", t.seed, t.parts)), chi.to_text())?;
            let rows: Vec<FeatureRow> = t.train[i]
                .iter()
                .map(|(id, f)| FeatureRow {
                    traj_id: *id,
                    part_idx: i,
                    oc: f.features.oc,
                    fd: f.features.fd,
                    label: Some(f.label == Decision::Accept),
                })
                .collect();
            let mut buf = Vec::new();
            write_features(&rows, &mut buf)?;
            write(&out.join("models").join(format!("s{}_m{}_part{i}_train.csv", t.seed, t.parts)), buf)?;
        }
    }
    let classifier: Vec<ClassifierRow> = trained.iter().flat_map(|t| t.rows.clone()).collect();
    write(&out.join(CLASSIFIER), rows_to_csv(&classifier)?)?;

    let all_cells = cells(cfg)?;
    let done = if resume { read_manifest(&out) } else { BTreeSet::new() };
    if !resume {
        write(&out.join(MANIFEST), "")?;
    }
    let manifest = Mutex::new(());
    let results: Vec<Result<CellResult>> = all_cells
        .par_iter()
        .map(|cell| {
            if done.contains(&cell.key()) {
                return load_cell(&out, cell);
            }
            let (r, a) = run_cell(prep, &trained, cell)?;
            save_cell(&out, cell, &r, &a)?;
            let _guard = manifest.lock().expect("manifest lock");
            let path = out.join(MANIFEST);
            let mut text = std::fs::read_to_string(&path).unwrap_or_default();
            let _ = writeln!(text, "done {}", cell.key());
            write(&path, text)?;
            Ok(r)
        })
        .collect();

    let mut agg = ExperimentResults {
        clean_mean: prep.clean_value.mean_return,
        clean_median: median(&prep.clean_value.returns),
        classifier,
        ..Default::default()
    };
    let mut first_error = None;
    for r in results {
        match r {
            Ok(c) => {
                agg.table.extend(c.table);
                agg.h1.extend(c.h1);
                agg.overrides.extend(c.overrides);
                agg.options.extend(c.options);
            }
            Err(e) => {
                log::error!("cell failed: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    // Partial tables are still written so a failed run can be inspected and resumed.
    write(&out.join(TABLE), rows_to_csv(&agg.table)?)?;
    write(&out.join(H1), rows_to_csv(&agg.h1)?)?;
    write(&out.join(OVERRIDE), rows_to_csv(&agg.overrides)?)?;
    write(&out.join(OPTIONS), rows_to_csv(&agg.options)?)?;
    if let Some(e) = first_error {
        return Err(e);
    }
    let sorted: String = all_cells.iter().map(|c| format!("done {}\n", c.key())).collect();
    write(&out.join(MANIFEST), sorted)?;
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.to_text().parse::<ExperimentConfig>().unwrap(), cfg);
        let err = "n_clean = 10\netas = 0.3,1.5\n".parse::<ExperimentConfig>().unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{err}");
        let err = "n_clean = 10\ncolor = red\n".parse::<ExperimentConfig>().unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let cfg: ExperimentConfig = "attack = kind=END,eta=0.6,gamma=0.3,seed=7\nseeds = 4".parse().unwrap();
        assert_eq!(cells(&cfg).unwrap().len(), 1);
        assert_eq!(cells(&cfg).unwrap()[0].spec.seed, 7);
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(0, STREAM_ATTACK, 0);
        assert_ne!(a, derive_seed(0, STREAM_ATTACK, 1));
        assert_ne!(a, derive_seed(0, STREAM_POOL, 0));
        assert_ne!(a, derive_seed(1, STREAM_ATTACK, 0));
        assert_eq!(a, derive_seed(0, STREAM_ATTACK, 0));
    }

    #[test]
    fn csv_rows_round_trip() {
        let rows = vec![OverrideRow {
            seed: 1,
            kind: "END".into(),
            eta: 0.3,
            gamma: 0.6,
            parts: 2,
            n_parts: 200,
            part_flips: 3,
            index_flips: 0,
            post_with: 380.25,
            post_without: 379.5,
            delta: 0.75,
        }];
        assert_eq!(rows_from_csv::<OverrideRow>(&rows_to_csv(&rows).unwrap()).unwrap(), rows);
    }
}
