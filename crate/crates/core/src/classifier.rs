//! Accept/reject decision over (OC, FD) features: a uniform-majority ensemble of
//! a 2-nearest-neighbor voter, a depth-limited CART tree, and a linear margin voter.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use crate::divergence::DivergenceFeatures;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Decision {
    Reject,
    Accept,
}

impl Decision {
    pub fn short(self) -> &'static str {
        match self {
            Decision::Accept => "Acc",
            Decision::Reject => "Rej",
        }
    }

    fn from_short(s: &str) -> Option<Self> {
        match s {
            "Acc" => Some(Decision::Accept),
            "Rej" => Some(Decision::Reject),
            _ => None,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// Accept iff `ret >= (1 - eps_p) * r_max`.
pub fn label(ret: f64, r_max: f64, eps_p: f64) -> Result<Decision> {
    if r_max.is_nan() || r_max <= 0.0 {
        return Err(Error::InvalidArgument(format!("label rule needs r_max > 0, got {r_max}")));
    }
    Ok(if ret >= (1.0 - eps_p) * r_max {
        Decision::Accept
    } else {
        Decision::Reject
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledFeature {
    pub features: DivergenceFeatures,
    pub label: Decision,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Normalizer {
    min: [f64; 2],
    max: [f64; 2],
}

impl Normalizer {
    fn fit(points: &[[f64; 2]]) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        Normalizer { min, max }
    }

    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for k in 0..2 {
            let span = self.max[k] - self.min[k];
            out[k] = if span > 0.0 {
                (p[k] - self.min[k]) / span
            } else {
                p[k] - self.min[k]
            };
        }
        out
    }
}

/// Distinct normalized training points with integer multiplicities.
#[derive(Debug, Clone, PartialEq)]
struct Sample {
    x: [f64; 2],
    label: Decision,
    count: f64,
}

fn dedupe(data: &[LabeledFeature], norm: &Normalizer) -> Vec<Sample> {
    let mut counts: BTreeMap<([u64; 2], Decision), u64> = BTreeMap::new();
    for d in data {
        let key = d.features.as_array().map(f64::to_bits);
        *counts.entry((key, d.label)).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|((bits, label), n)| Sample {
            x: norm.apply(bits.map(f64::from_bits)),
            label,
            count: n as f64,
        })
        .collect()
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

#[derive(Debug, Clone, PartialEq)]
struct Knn {
    points: Vec<([f64; 2], Decision)>,
}

impl Knn {
    fn predict(&self, x: [f64; 2]) -> Decision {
        let mut best: [Option<(f64, Decision)>; 2] = [None, None];
        for &(p, l) in &self.points {
            let d = sq_dist(p, x);
            if best[0].is_none_or(|(bd, _)| d < bd) {
                best[1] = best[0];
                best[0] = Some((d, l));
            } else if best[1].is_none_or(|(bd, _)| d < bd) {
                best[1] = Some((d, l));
            }
        }
        match best {
            [Some((_, a)), None] => a,
            // Disagreeing neighbors at equal distance fall back to Reject.
            [Some((da, a)), Some((db, b))] if a == b || da < db => a,
            _ => Decision::Reject,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tree {
    Leaf(Decision),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Tree>,
        right: Box<Tree>,
    },
}

pub const TREE_MAX_DEPTH: usize = 9;

fn weighted_counts(samples: &[&Sample]) -> (f64, f64) {
    samples.iter().fold((0.0, 0.0), |(acc, rej), s| match s.label {
        Decision::Accept => (acc + s.count, rej),
        Decision::Reject => (acc, rej + s.count),
    })
}

fn gini(acc: f64, rej: f64) -> f64 {
    let n = acc + rej;
    if n == 0.0 {
        return 0.0;
    }
    1.0 - (acc / n).powi(2) - (rej / n).powi(2)
}

fn majority(acc: f64, rej: f64) -> Decision {
    if acc > rej {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

impl Tree {
    fn grow(samples: &[&Sample], depth: usize) -> Tree {
        let (acc, rej) = weighted_counts(samples);
        let parent = gini(acc, rej);
        if depth == 0 || parent == 0.0 {
            return Tree::Leaf(majority(acc, rej));
        }
        let n = acc + rej;
        let mut best: Option<(f64, usize, f64)> = None;
        for feature in 0..2 {
            let mut values: Vec<f64> = samples.iter().map(|s| s.x[feature]).collect();
            values.sort_by(f64::total_cmp);
            values.dedup();
            for w in values.windows(2) {
                let threshold = (w[0] + w[1]) / 2.0;
                let (la, lr, ra, rr) = samples.iter().fold((0.0, 0.0, 0.0, 0.0), |(la, lr, ra, rr), s| {
                    let left = s.x[feature] <= threshold;
                    match (left, s.label) {
                        (true, Decision::Accept) => (la + s.count, lr, ra, rr),
                        (true, Decision::Reject) => (la, lr + s.count, ra, rr),
                        (false, Decision::Accept) => (la, lr, ra + s.count, rr),
                        (false, Decision::Reject) => (la, lr, ra, rr + s.count),
                    }
                });
                let impurity = ((la + lr) * gini(la, lr) + (ra + rr) * gini(ra, rr)) / n;
                if best.is_none_or(|(bi, _, _)| impurity < bi) {
                    best = Some((impurity, feature, threshold));
                }
            }
        }
        match best {
            Some((impurity, feature, threshold)) if impurity < parent => {
                let (l, r): (Vec<&Sample>, Vec<&Sample>) =
                    samples.iter().partition(|s| s.x[feature] <= threshold);
                Tree::Split {
                    feature,
                    threshold,
                    left: Box::new(Tree::grow(&l, depth - 1)),
                    right: Box::new(Tree::grow(&r, depth - 1)),
                }
            }
            _ => Tree::Leaf(majority(acc, rej)),
        }
    }

    fn predict(&self, x: [f64; 2]) -> Decision {
        match self {
            Tree::Leaf(d) => *d,
            Tree::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }

    fn dump(&self, out: &mut String) {
        match self {
            Tree::Leaf(d) => {
                let _ = writeln!(out, "leaf {d}");
            }
            Tree::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let _ = writeln!(out, "split {feature} {threshold}");
                left.dump(out);
                right.dump(out);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    w: [f64; 2],
    b: f64,
}

const LINEAR_EPOCHS: usize = 2000;
const LINEAR_L2: f64 = 1e-3;

impl Linear {
    /// Full-batch subgradient descent on weighted mean hinge loss plus L2.
    fn fit(samples: &[Sample]) -> Linear {
        let total: f64 = samples.iter().map(|s| s.count).sum();
        let mut m = Linear { w: [0.0; 2], b: 0.0 };
        for epoch in 0..LINEAR_EPOCHS {
            let mut gw = [LINEAR_L2 * m.w[0], LINEAR_L2 * m.w[1]];
            let mut gb = 0.0;
            for s in samples {
                let y = if s.label == Decision::Accept { 1.0 } else { -1.0 };
                if y * m.score(s.x) < 1.0 {
                    let c = s.count / total;
                    gw[0] -= c * y * s.x[0];
                    gw[1] -= c * y * s.x[1];
                    gb -= c * y;
                }
            }
            let lr = 1.0 / ((epoch + 1) as f64).sqrt();
            m.w[0] -= lr * gw[0];
            m.w[1] -= lr * gw[1];
            m.b -= lr * gb;
        }
        m
    }

    fn score(&self, x: [f64; 2]) -> f64 {
        self.w[0] * x[0] + self.w[1] * x[1] + self.b
    }

    fn predict(&self, x: [f64; 2]) -> Decision {
        if self.score(x) > 0.0 {
            Decision::Accept
        } else {
            Decision::Reject
        }
    }
}

/// Trained ensemble. Normalization is frozen at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct Chi {
    norm: Normalizer,
    knn: Knn,
    tree: Tree,
    linear: Linear,
}

pub fn train_chi(data: &[LabeledFeature]) -> Result<Chi> {
    if data.is_empty() {
        return Err(Error::Empty("classifier training data"));
    }
    let first = data[0].label;
    if data.iter().all(|d| d.label == first) {
        return Err(Error::SingleClass);
    }
    let raw: Vec<[f64; 2]> = data.iter().map(|d| d.features.as_array()).collect();
    if raw.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("features must be finite".into()));
    }
    let norm = Normalizer::fit(&raw);
    let samples = dedupe(data, &norm);
    let refs: Vec<&Sample> = samples.iter().collect();
    Ok(Chi {
        norm,
        knn: Knn {
            points: samples.iter().map(|s| (s.x, s.label)).collect(),
        },
        tree: Tree::grow(&refs, TREE_MAX_DEPTH),
        linear: Linear::fit(&samples),
    })
}

impl Chi {
    /// Votes of the kNN, tree, and linear members, in that order.
    pub fn votes(&self, f: &DivergenceFeatures) -> [Decision; 3] {
        let x = self.norm.apply(f.as_array());
        [self.knn.predict(x), self.tree.predict(x), self.linear.predict(x)]
    }

    /// Uniform majority; ties go to Reject.
    pub fn predict(&self, f: &DivergenceFeatures) -> Decision {
        let votes = self.votes(f);
        let accepts = votes.iter().filter(|&&v| v == Decision::Accept).count();
        if 2 * accepts > votes.len() {
            Decision::Accept
        } else {
            Decision::Reject
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("#chi\n");
        let n = &self.norm;
        let _ = writeln!(out, "norm {} {} {} {}", n.min[0], n.max[0], n.min[1], n.max[1]);
        let _ = writeln!(out, "knn {}", self.knn.points.len());
        for (p, l) in &self.knn.points {
            let _ = writeln!(out, "{} {} {l}", p[0], p[1]);
        }
        out.push_str("tree\n");
        self.tree.dump(&mut out);
        let l = &self.linear;
        let _ = writeln!(out, "linear {} {} {}", l.w[0], l.w[1], l.b);
        out.push_str("#end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Chi> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse(text.lines().count().max(1), format!("unexpected end of input, expected {what}")))
        };

        let (n, line) = next("#chi")?;
        if line != "#chi" {
            return Err(Error::parse(n, "expected #chi"));
        }
        let (n, line) = next("norm")?;
        let v = fields(line, "norm", 4, n)?;
        let norm = Normalizer {
            min: [v[0], v[2]],
            max: [v[1], v[3]],
        };

        let (n, line) = next("knn")?;
        let count = line
            .strip_prefix("knn ")
            .and_then(|c| c.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::parse(n, "expected `knn <count>`"))?;
        let mut points = Vec::new();
        for _ in 0..count {
            let (n, line) = next("knn point")?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(Error::parse(n, "expected `x y label`"));
            }
            let x = parse_real(toks[0], n)?;
            let y = parse_real(toks[1], n)?;
            let l = Decision::from_short(toks[2]).ok_or_else(|| Error::parse(n, format!("bad label {:?}", toks[2])))?;
            points.push(([x, y], l));
        }

        let (n, line) = next("tree")?;
        if line != "tree" {
            return Err(Error::parse(n, "expected tree"));
        }
        let tree = parse_tree(&mut next, 0)?;

        let (n, line) = next("linear")?;
        let v = fields(line, "linear", 3, n)?;
        let linear = Linear { w: [v[0], v[1]], b: v[2] };

        let (n, line) = next("#end")?;
        if line != "#end" {
            return Err(Error::parse(n, "expected #end"));
        }
        Ok(Chi {
            norm,
            knn: Knn { points },
            tree,
            linear,
        })
    }
}

const PARSE_TREE_DEPTH_LIMIT: usize = 64;

fn parse_tree<'a, F>(next: &mut F, depth: usize) -> Result<Tree>
where
    F: FnMut(&str) -> Result<(usize, &'a str)>,
{
    let (n, line) = next("tree node")?;
    if depth > PARSE_TREE_DEPTH_LIMIT {
        return Err(Error::parse(n, "tree too deep"));
    }
    let toks: Vec<&str> = line.split_whitespace().collect();
    match toks.as_slice() {
        ["leaf", d] => Decision::from_short(d)
            .map(Tree::Leaf)
            .ok_or_else(|| Error::parse(n, format!("bad leaf label {d:?}"))),
        ["split", f, t] => {
            let feature = f
                .parse::<usize>()
                .ok()
                .filter(|&f| f < 2)
                .ok_or_else(|| Error::parse(n, "split feature must be 0 or 1"))?;
            let threshold = parse_real(t, n)?;
            let left = Box::new(parse_tree(next, depth + 1)?);
            let right = Box::new(parse_tree(next, depth + 1)?);
            Ok(Tree::Split {
                feature,
                threshold,
                left,
                right,
            })
        }
        _ => Err(Error::parse(n, "expected `leaf <label>` or `split <feature> <threshold>`")),
    }
}

fn parse_real(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|e| Error::parse(line, format!("{tok:?}: {e}")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::parse(line, "value must be finite"))
    }
}

fn fields(line: &str, key: &str, n: usize, line_no: usize) -> Result<Vec<f64>> {
    let rest = line
        .strip_prefix(key)
        .ok_or_else(|| Error::parse(line_no, format!("expected {key}")))?;
    let v = rest
        .split_whitespace()
        .map(|t| parse_real(t, line_no))
        .collect::<Result<Vec<_>>>()?;
    if v.len() != n {
        return Err(Error::parse(line_no, format!("{key} needs {n} values")));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub accuracy: f64,
    /// F1 with Accept as the positive class.
    pub f1: f64,
    /// Share of Reject-labeled items predicted Accept.
    pub false_negative_rate: f64,
}

pub fn score(chi: &Chi, test: &[LabeledFeature]) -> Result<Score> {
    let preds: Vec<Decision> = test.iter().map(|t| chi.predict(&t.features)).collect();
    score_predictions(&preds, test)
}

pub fn score_predictions(preds: &[Decision], test: &[LabeledFeature]) -> Result<Score> {
    if test.is_empty() {
        return Err(Error::Empty("scoring needs at least one item"));
    }
    let (mut tp, mut fp, mut fn_, mut correct, mut rejects) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (p, t) in preds.iter().zip(test) {
        correct += usize::from(*p == t.label);
        rejects += usize::from(t.label == Decision::Reject);
        match (p, t.label) {
            (Decision::Accept, Decision::Accept) => tp += 1,
            (Decision::Accept, Decision::Reject) => fp += 1,
            (Decision::Reject, Decision::Accept) => fn_ += 1,
            _ => {}
        }
    }
    let f1_den = 2 * tp + fp + fn_;
    Ok(Score {
        accuracy: correct as f64 / test.len() as f64,
        f1: if f1_den == 0 { 0.0 } else { 2.0 * tp as f64 / f1_den as f64 },
        false_negative_rate: if rejects == 0 { 0.0 } else { fp as f64 / rejects as f64 },
    })
}
