//! Stage-by-stage replays of the lines-spanned argument on a grid A1 × A2 and
//! of the incidence argument in P²(F_p).
//!
//! Every "for some fixed ..." choice becomes a deterministic argmax with ties
//! going to the smallest candidate. Every asymptotic comparison is recorded
//! as a measured value, a predicted value n^e (suppressed constants set to 1)
//! and their ratio; none of them fails a run. Exact identities that must hold
//! on any input (subset chains, Cauchy-Schwarz, Plünnecke-Ruzsa instances)
//! are recorded as [`Check`]s.
//!
//! A refinement that empties out stops the run: the trace is returned with
//! [`Outcome::EmptyStage`] naming the stage that emptied.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::addcomb::{dilate, iterated_sumset, plunnecke_check, ratio_set, representation_count_scaled, sumset, translate, covering_translates, ElementSet};
use crate::bsg::{bsg_extract, BsgThresholds, PairGraph};
use crate::error::{Error, Result};
use crate::field::PrimeField;
use crate::geometry::{map_to_infinity, proj_incident, AffinePoint, ProjLine, ProjPoint};
use crate::incidence::{
    cartesian_product, count_proj_incidences, spanned_lines, BeckStatistic, ProjLineSet, ProjPointSet,
    BECK_EXPONENT_GAP, INCIDENCE_EXPONENT_GAP,
};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Stage names of the Beck pipeline, in execution order.
pub const BECK_STAGES: [&str; 23] = [
    "spanned_lines",
    "rich_lines",
    "fixed_pair",
    "popular_slopes",
    "bsg",
    "bsg_sizes",
    "intersection_argmax",
    "popular_intersections",
    "b2_size",
    "intersection_components",
    "doubling",
    "dilate_sumsets",
    "k_max",
    "energy",
    "slope_lines",
    "vertical_section",
    "y1_size",
    "ratio_set",
    "covering",
    "positive_proportion",
    "single_realisation",
    "plunnecke_chain",
    "final_bound",
];

/// Stage names of the incidence pipeline, in execution order.
pub const INCIDENCE_STAGES: [&str; 12] = [
    "incidences",
    "erasure",
    "popular_points",
    "popular_lines",
    "refined_points",
    "neighborhoods",
    "pair",
    "projective_map",
    "grid_incidences",
    "collinear_handoff",
    "beck_handoff",
    "exponent_relation",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeckParams {
    pub delta: f64,
    /// Rich lines carry at least max(3, c_rich·n^(1-δ)) points.
    pub c_rich: f64,
    /// Popularity constant for B1 and B2.
    pub c_pop: f64,
    pub c_bsg: f64,
    pub big_c_bsg: f64,
    /// Fraction left uncovered by the covering stages.
    pub eps_cover: f64,
}

impl Default for BeckParams {
    fn default() -> Self {
        BeckParams {
            delta: BECK_EXPONENT_GAP,
            c_rich: 1.0,
            c_pop: 1.0,
            c_bsg: BsgThresholds::default().c_bsg,
            big_c_bsg: BsgThresholds::default().big_c_bsg,
            eps_cover: 0.01,
        }
    }
}

impl BeckParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter(format!("delta = {} outside (0, 1)", self.delta)));
        }
        for (name, v) in [
            ("c_rich", self.c_rich),
            ("c_pop", self.c_pop),
            ("c_bsg", self.c_bsg),
            ("big_c_bsg", self.big_c_bsg),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.eps_cover > 0.0 && self.eps_cover < 1.0) {
            return Err(Error::InvalidParameter(format!("eps_cover = {} outside (0, 1)", self.eps_cover)));
        }
        Ok(())
    }

    pub fn thresholds(&self) -> BsgThresholds {
        BsgThresholds {
            c_bsg: self.c_bsg,
            big_c_bsg: self.big_c_bsg,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncidenceParams {
    pub epsilon: f64,
    /// Points on more than c_erase·n^(1/2+ε) lines are erased.
    pub c_erase: f64,
    /// Popular points and lines have degree at least c_pop·n^(1/2-ε).
    pub c_pop: f64,
    /// Number of (lines, points) refinement rounds after P1; 1 gives L1, P2.
    pub refine_depth: usize,
    pub beck: BeckParams,
}

impl Default for IncidenceParams {
    fn default() -> Self {
        IncidenceParams {
            epsilon: INCIDENCE_EXPONENT_GAP,
            c_erase: 1.0,
            c_pop: 1.0,
            refine_depth: 1,
            beck: BeckParams::default(),
        }
    }
}

impl IncidenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::InvalidParameter(format!("epsilon = {} outside (0, 1/2)", self.epsilon)));
        }
        for (name, v) in [("c_erase", self.c_erase), ("c_pop", self.c_pop)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be positive")));
            }
        }
        if self.refine_depth == 0 {
            return Err(Error::InvalidParameter("refine_depth must be at least 1".into()));
        }
        self.beck.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub stage_name: String,
    /// The relation this stage measures, e.g. "|L(P)| ~ n^(2+2d)".
    pub relation: String,
    pub measured: f64,
    /// `None` where no exponent is attached to the quantity.
    pub predicted: Option<f64>,
    pub ratio: Option<f64>,
    pub payload_sizes: BTreeMap<String, usize>,
    pub checks: Vec<Check>,
}

impl Stage {
    fn new(name: &str, relation: &str, measured: f64, predicted: Option<f64>) -> Self {
        Stage {
            stage_name: name.to_string(),
            relation: relation.to_string(),
            measured,
            predicted,
            ratio: predicted.map(|p| measured / p),
            payload_sizes: BTreeMap::new(),
            checks: Vec::new(),
        }
    }

    fn size(mut self, key: &str, v: usize) -> Self {
        self.payload_sizes.insert(key.to_string(), v);
        self
    }

    fn check(mut self, name: &str, holds: bool) -> Self {
        self.checks.push(Check {
            name: name.to_string(),
            holds,
        });
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    EmptyStage { stage: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseTag {
    CaseI,
    CaseII,
}

/// Outcome of splitting on the size of the ratio set R of Y1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSplit {
    pub tag: CaseTag,
    pub ratio_set_size: usize,
    pub y1_size: usize,
    /// CaseII: r + 1 ∉ R for the first escaping quadruple; CaseI: the
    /// nonzero r ∈ R maximising |Y1 + rY1|. `None` only when R = F_p in CaseII.
    pub xi: Option<u64>,
    /// (p, q, s, t) with r = (p - q)/(s - t).
    pub quadruple: Option<[u64; 4]>,
    pub r: Option<u64>,
    /// |Y1 + ξY1|
    pub sq_size: Option<usize>,
}

impl CaseSplit {
    /// In CaseII, |Y1 + ξY1| = |Y1|².
    pub fn certificate_holds(&self) -> bool {
        match (self.tag, self.sq_size) {
            (CaseTag::CaseII, Some(s)) => s == self.y1_size * self.y1_size,
            (CaseTag::CaseII, None) => false,
            (CaseTag::CaseI, _) => true,
        }
    }
}

/// Per-slope output of the extraction stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopePiece {
    pub solutions: u64,
    pub a1: Vec<u64>,
    pub a2: Vec<u64>,
    /// |A¹_b + b·A²_b|
    pub sumset: usize,
    pub meets_thresholds: bool,
}

/// Typed intermediate sets of a Beck run; fields stay empty past a truncation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BeckSets {
    pub rich_threshold: Option<u64>,
    pub rich_census: BTreeMap<u64, usize>,
    pub y_pair: Option<(u64, u64)>,
    pub fixed_pair_solutions: Option<u64>,
    /// b -> number of (x1, x2) with x1 + b·x2 ∈ (1 + b)·A1
    pub slope_solutions: BTreeMap<u64, u64>,
    pub b: Vec<u64>,
    pub b1: Vec<u64>,
    pub pieces: BTreeMap<u64, SlopePiece>,
    pub b_star: Option<u64>,
    /// b -> |A_b ∩ A_*|
    pub intersections: BTreeMap<u64, u64>,
    pub b2: Vec<u64>,
    pub x: Vec<u64>,
    pub y: Vec<u64>,
    pub k: Option<usize>,
    pub pair_solutions: Option<u64>,
    pub x_tilde: Option<(u64, u64)>,
    pub rich_slopes: Vec<u64>,
    pub u_star: Option<u64>,
    pub y1: Vec<u64>,
    pub case: Option<CaseSplit>,
    pub y1_prime: Vec<u64>,
    pub a2_tilde: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeckTrace {
    pub schema_version: u32,
    pub prime: u64,
    pub n: usize,
    pub params: BeckParams,
    /// n < √p
    pub in_range: bool,
    /// n >= 4
    pub size_ok: bool,
    pub lines: usize,
    pub delta_eff: f64,
    pub stages: Vec<Stage>,
    pub sets: BeckSets,
    pub outcome: Outcome,
    /// 267·δ_eff >= 1
    pub verdict: bool,
}

impl BeckTrace {
    pub fn is_complete(&self) -> bool {
        self.outcome == Outcome::Completed
    }

    pub fn truncated_at(&self) -> Option<&str> {
        match &self.outcome {
            Outcome::Completed => None,
            Outcome::EmptyStage { stage } => Some(stage),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.stage_name == name)
    }

    pub fn failed_checks(&self) -> Vec<String> {
        failed(&self.stages)
    }

    pub fn checks_hold(&self) -> bool {
        self.failed_checks().is_empty()
    }

    fn push(&mut self, s: Stage) {
        self.stages.push(s);
    }

    fn truncate(mut self, stage: &str) -> Self {
        self.outcome = Outcome::EmptyStage {
            stage: stage.to_string(),
        };
        self
    }
}

fn failed(stages: &[Stage]) -> Vec<String> {
    stages
        .iter()
        .flat_map(|s| {
            s.checks
                .iter()
                .filter(|c| !c.holds)
                .map(move |c| format!("{}/{}", s.stage_name, c.name))
        })
        .collect()
}

/// δ / (40 - 2δ)
pub fn epsilon_from_delta(delta: f64) -> f64 {
    delta / (40.0 - 2.0 * delta)
}

pub fn epsilon_from_delta_exact(delta: Ratio<i64>) -> Ratio<i64> {
    delta / (Ratio::from_integer(40) - delta * 2)
}

/// #{(x1, x2) ∈ A1² : x1 + b·x2 ∈ (1 + b)·A1}.
///
/// `b` is the slope y3/(1 - y3) of a normalised y3 ∉ {0, 1}, so b = 0 and
/// b = -1 are rejected.
pub fn solutions_bssetup(a1: &ElementSet, b: u64) -> Result<u64> {
    let f = *a1.field();
    let b = b % f.modulus();
    if b == 0 || b == f.modulus() - 1 {
        return Err(Error::BadSlope(b));
    }
    let scale = f.inv(f.add(1, b))?;
    let rep = representation_count_scaled(a1, b, a1)?;
    Ok(rep
        .iter()
        .filter(|&(s, _)| a1.contains(f.mul(s, scale)))
        .map(|(_, r)| r)
        .sum())
}

fn quadruples(y: &[u64]) -> impl Iterator<Item = [u64; 4]> + '_ {
    y.iter().flat_map(move |&p| {
        y.iter().flat_map(move |&q| {
            y.iter()
                .flat_map(move |&s| y.iter().filter(move |&&t| t != s).map(move |&t| [p, q, s, t]))
        })
    })
}

fn quotient(f: &PrimeField, [p, q, s, t]: [u64; 4]) -> u64 {
    f.div(f.sub(p, q), f.sub(s, t)).expect("s != t")
}

/// Case I when |R| >= |Y1|², Case II otherwise, with the certificate ξ.
///
/// R = F_p is filed under Case I even when p < |Y1|²: no ξ can escape R then.
pub fn case_split(y1: &ElementSet) -> Result<CaseSplit> {
    let f = *y1.field();
    let r_set = ratio_set(y1)?;
    let m = y1.len();
    let sq = |xi: u64| -> Result<usize> { Ok(sumset(y1, &dilate(xi, y1)?)?.len()) };
    if is_case_one(r_set.len(), m, f.modulus()) {
        let mut best: Option<(usize, u64)> = None;
        for r in r_set.iter().filter(|&r| r != 0) {
            let s = sq(r)?;
            if best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, r));
            }
        }
        let (s, xi) = best.expect("R contains 1");
        let quad = quadruples(y1.as_slice()).find(|&q| quotient(&f, q) == xi);
        return Ok(CaseSplit {
            tag: CaseTag::CaseI,
            ratio_set_size: r_set.len(),
            y1_size: m,
            xi: Some(xi),
            quadruple: quad,
            r: Some(xi),
            sq_size: Some(s),
        });
    }
    let found = quadruples(y1.as_slice())
        .map(|q| (q, quotient(&f, q)))
        .find(|&(_, r)| !r_set.contains(f.add(r, 1)));
    let (xi, quad, r, sq_size) = match found {
        Some((q, r)) => {
            let xi = f.add(r, 1);
            (Some(xi), Some(q), Some(r), Some(sq(xi)?))
        }
        None => (None, None, None, None),
    };
    Ok(CaseSplit {
        tag: CaseTag::CaseII,
        ratio_set_size: r_set.len(),
        y1_size: m,
        xi,
        quadruple: quad,
        r,
        sq_size,
    })
}

fn is_case_one(r: usize, m: usize, p: u64) -> bool {
    r >= m * m || r as u64 == p
}

/// Index of the maximum, ties to the first.
fn argmax_by_key<T, K: Ord>(items: &[T], key: impl Fn(&T) -> K) -> Option<usize> {
    let mut best: Option<(usize, K)> = None;
    for (i, it) in items.iter().enumerate() {
        let k = key(it);
        if best.as_ref().is_none_or(|(_, bk)| k > *bk) {
            best = Some((i, k));
        }
    }
    best.map(|(i, _)| i)
}

/// Keeps the ceil(|src|/2) elements whose image under `scale` is covered
/// earliest by translates of `by`.
fn half_by_covering(src: &ElementSet, scale: u64, by: &ElementSet, eps: f64) -> Result<(ElementSet, usize)> {
    let f = *src.field();
    let image = dilate(scale, src)?;
    let cover = covering_translates(&image, by, eps)?;
    let pos: BTreeMap<u64, Option<usize>> = image.iter().zip(cover.cover_index.iter().copied()).collect();
    let mut ranked: Vec<(usize, u64)> = src
        .iter()
        .map(|y| (pos[&f.mul(scale, y)].unwrap_or(usize::MAX), y))
        .collect();
    ranked.sort_unstable();
    let keep = src.len().div_ceil(2);
    Ok((
        ElementSet::new(f, ranked.into_iter().take(keep).map(|(_, y)| y)),
        cover.offsets.len(),
    ))
}

fn vec(s: &ElementSet) -> Vec<u64> {
    s.as_slice().to_vec()
}

fn plunnecke_holds(y: &ElementSet, xs: &[&ElementSet]) -> Result<bool> {
    Ok(plunnecke_check(y, xs)?.holds)
}

/// Replays the lines-spanned argument on A1 × A2.
pub fn run_beck_pipeline(a1: &ElementSet, a2: &ElementSet, params: &BeckParams) -> Result<BeckTrace> {
    params.validate()?;
    a1.check_field(a2)?;
    let n = a1.len();
    if a2.len() != n {
        return Err(Error::InvalidParameter(format!(
            "|A1| = {} and |A2| = {} differ",
            n,
            a2.len()
        )));
    }
    if n < 2 {
        return Err(Error::SetTooSmall { needed: 2, got: n });
    }
    let f = *a1.field();
    let p = f.modulus();
    let d = params.delta;
    let nf = n as f64;
    let pw = |e: f64| nf.powf(e);
    let n2 = (n * n) as u64;

    // |L(P)|
    let grid = cartesian_product(f, a1.as_slice(), a2.as_slice());
    let lines = spanned_lines(&grid)?;
    let stat = BeckStatistic::from_counts(n, lines.len(), p);
    let mut t = BeckTrace {
        schema_version: TRACE_SCHEMA_VERSION,
        prime: p,
        n,
        params: *params,
        in_range: stat.in_range,
        size_ok: n >= 4,
        lines: lines.len(),
        delta_eff: stat.delta_eff,
        stages: Vec::new(),
        sets: BeckSets::default(),
        outcome: Outcome::Completed,
        verdict: 267.0 * stat.delta_eff >= 1.0,
    };
    t.push(
        Stage::new("spanned_lines", "|L(P)| ~ n^(2+2d)", lines.len() as f64, Some(pw(2.0 + 2.0 * d)))
            .size("points", grid.len())
            .size("lines", lines.len())
            .check("pair_conservation", lines.pair_total() == n2 * (n2 - 1) / 2),
    );

    // rich lines and the collinear triples they carry
    let threshold = ((params.c_rich * pw(1.0 - d)).ceil() as u64).max(3);
    let rich: Vec<u64> = lines.iter().map(|(_, &k)| k).filter(|&k| k >= threshold).collect();
    let rich_triples: u64 = rich.iter().map(|&k| k * (k - 1) * (k - 2)).sum();
    t.sets.rich_threshold = Some(threshold);
    t.sets.rich_census = lines.census().into_iter().filter(|&(k, _)| k >= threshold).collect();
    t.push(
        Stage::new("rich_lines", "triples on rich lines ~ n^(5-d)", rich_triples as f64, Some(pw(5.0 - d)))
            .size("rich_lines", rich.len())
            .size("threshold", threshold as usize),
    );
    if rich.is_empty() {
        return Ok(t.truncate("rich_lines"));
    }

    // the pair (y1, y2) with the most solutions of the fixed-pair determinant equation
    let ys = a2.as_slice();
    let row_count = |y1: u64, y2: u64, y3: u64| -> u64 {
        let tt = f.div(f.sub(y3, y1), f.sub(y2, y1)).expect("y1 != y2");
        let one_minus = f.sub(1, tt);
        a1.iter()
            .map(|x1| {
                let base = f.mul(x1, one_minus);
                a1.iter().filter(|&x2| a1.contains(f.add(base, f.mul(x2, tt)))).count() as u64
            })
            .sum()
    };
    let pairs: Vec<(u64, u64)> = ys
        .iter()
        .enumerate()
        .flat_map(|(i, &y1)| ys[i + 1..].iter().map(move |&y2| (y1, y2)))
        .collect();
    let counts: Vec<u64> = pairs
        .par_iter()
        .map(|&(y1, y2)| ys.iter().map(|&y3| row_count(y1, y2, y3)).sum())
        .collect();
    let best = argmax_by_key(&counts, |&c| c).expect("n >= 2 gives a pair");
    let (y1, y2) = pairs[best];
    let dett = counts[best];
    t.sets.y_pair = Some((y1, y2));
    t.sets.fixed_pair_solutions = Some(dett);
    t.push(
        Stage::new("fixed_pair", "solutions for fixed (y1, y2) ~ n^(3-d)", dett as f64, Some(pw(3.0 - d)))
            .size("candidate_pairs", pairs.len()),
    );

    // B, per-slope solution counts, and the popular slopes B1
    let mut slope_solutions = BTreeMap::new();
    for &y3 in ys.iter().filter(|&&y| y != y1 && y != y2) {
        let tt = f.div(f.sub(y3, y1), f.sub(y2, y1))?;
        let b = f.div(tt, f.sub(1, tt))?;
        slope_solutions.insert(b, solutions_bssetup(a1, b)?);
    }
    let b_set: Vec<u64> = slope_solutions.keys().copied().collect();
    let pop = (params.c_pop * pw(2.0 - d)).max(1.0);
    let b1: Vec<u64> = slope_solutions
        .iter()
        .filter(|&(_, &c)| c as f64 >= pop)
        .map(|(&b, _)| b)
        .collect();
    let decomposition = slope_solutions.values().sum::<u64>() + 2 * n2 == dett;
    t.sets.slope_solutions = slope_solutions;
    t.sets.b = b_set.clone();
    t.sets.b1 = b1.clone();
    t.push(
        Stage::new("popular_slopes", "|B1| >> n^(1-d)", b1.len() as f64, Some(pw(1.0 - d)))
            .size("b", b_set.len())
            .size("b1", b1.len())
            .check("fixed_pair_decomposition", decomposition)
            .check("b_size", b_set.len() == n - 2)
            .check("b1_subset_b", b1.iter().all(|b| b_set.contains(b))),
    );
    if b1.is_empty() {
        return Ok(t.truncate("popular_slopes"));
    }

    // extraction for each popular slope
    let thresholds = params.thresholds();
    let solutions = t.sets.slope_solutions.clone();
    let extracted: Vec<Result<(u64, ElementSet, ElementSet, SlopePiece)>> = b1
        .par_iter()
        .map(|&b| {
            let y = dilate(b, a1)?;
            let targets = dilate(f.add(1, b), a1)?;
            let g = PairGraph::from_sum_targets(a1.clone(), y, &targets)?;
            let res = bsg_extract(&g)?;
            let a2b = dilate(f.inv(b)?, &res.y_sub)?;
            let piece = SlopePiece {
                solutions: solutions[&b],
                a1: vec(&res.x_sub),
                a2: vec(&a2b),
                sumset: res.sumset_size,
                meets_thresholds: res.meets(&thresholds),
            };
            Ok((b, res.x_sub, a2b, piece))
        })
        .collect();
    let mut a1b: BTreeMap<u64, ElementSet> = BTreeMap::new();
    let mut a2b: BTreeMap<u64, ElementSet> = BTreeMap::new();
    for r in extracted {
        let (b, x, y, piece) = r?;
        a1b.insert(b, x);
        a2b.insert(b, y);
        t.sets.pieces.insert(b, piece);
    }
    let max_sumset = t.sets.pieces.values().map(|pc| pc.sumset).max().unwrap_or(0);
    let mut bsg_sum_ok = true;
    for &b in &b1 {
        bsg_sum_ok &= sumset(&a1b[&b], &dilate(b, &a2b[&b])?)?.len() == t.sets.pieces[&b].sumset;
    }
    t.push(
        Stage::new("bsg", "|A1_b + b A2_b| << n^(1+5d)", max_sumset as f64, Some(pw(1.0 + 5.0 * d)))
            .size(
                "meeting_thresholds",
                t.sets.pieces.values().filter(|pc| pc.meets_thresholds).count(),
            )
            .check("pieces_inside_a1", b1.iter().all(|b| a1b[b].is_subset(a1) && a2b[b].is_subset(a1)))
            .check("sumset_recomputed", bsg_sum_ok),
    );

    let min_piece = b1
        .iter()
        .map(|b| a1b[b].len().min(a2b[b].len()))
        .min()
        .unwrap_or(0)
        .min(b1.len());
    t.push(
        Stage::new("bsg_sizes", "|A1_b|, |A2_b|, |B1| >> n^(1-d)", min_piece as f64, Some(pw(1.0 - d)))
            .size("min_piece", min_piece),
    );
    if min_piece == 0 {
        return Ok(t.truncate("bsg_sizes"));
    }

    // b_* maximising the total overlap of A_b = A1_b × A2_b with A_*
    let overlap = |b: u64, c: u64| -> u64 {
        (a1b[&b].intersection(&a1b[&c]).len() * a2b[&b].intersection(&a2b[&c]).len()) as u64
    };
    let totals: Vec<u64> = b1.iter().map(|&c| b1.iter().map(|&b| overlap(b, c)).sum()).collect();
    let star = argmax_by_key(&totals, |&s| s).expect("B1 non-empty");
    let b_star = b1[star];
    let all_pairs: u128 = totals.iter().map(|&s| s as u128).sum();
    let mass: u128 = b1.iter().map(|b| (a1b[b].len() * a2b[b].len()) as u128).sum();
    t.sets.b_star = Some(b_star);
    t.push(
        Stage::new(
            "intersection_argmax",
            "sum_b |A_b ∩ A_*| >> |B1| n^(2-4d)",
            totals[star] as f64,
            Some(b1.len() as f64 * pw(2.0 - 4.0 * d)),
        )
        .check("cauchy_schwarz", mass * mass <= (n2 as u128) * all_pairs)
        .check("argmax_dominates_average", totals[star] as u128 * b1.len() as u128 >= all_pairs),
    );

    // B2: slopes whose product set meets A_* in many points
    let pop2 = (params.c_pop * pw(2.0 - 4.0 * d)).max(1.0);
    let intersections: BTreeMap<u64, u64> = b1.iter().map(|&b| (b, overlap(b, b_star))).collect();
    let b2: Vec<u64> = intersections
        .iter()
        .filter(|&(_, &c)| c as f64 >= pop2)
        .map(|(&b, _)| b)
        .collect();
    let min_inter = b2.iter().map(|b| intersections[b]).min().unwrap_or(0);
    t.sets.intersections = intersections;
    t.sets.b2 = b2.clone();
    t.push(
        Stage::new(
            "popular_intersections",
            "|A_b ∩ A_*| >> n^(2-4d) on B2",
            min_inter as f64,
            Some(pw(2.0 - 4.0 * d)),
        )
        .size("b2", b2.len()),
    );
    if b2.is_empty() {
        return Ok(t.truncate("popular_intersections"));
    }
    t.push(
        Stage::new("b2_size", "|B2| >> n^(1-5d)", b2.len() as f64, Some(pw(1.0 - 5.0 * d)))
            .check("b2_subset_b1", b2.iter().all(|b| b1.contains(b)))
            .check("b1_subset_b", b1.iter().all(|b| b_set.contains(b))),
    );

    let (x1s, x2s) = (&a1b[&b_star], &a2b[&b_star]);
    let wedge1: BTreeMap<u64, ElementSet> = b2.iter().map(|&b| (b, a1b[&b].intersection(x1s))).collect();
    let wedge2: BTreeMap<u64, ElementSet> = b2.iter().map(|&b| (b, a2b[&b].intersection(x2s))).collect();
    let min_wedge = b2
        .iter()
        .map(|b| wedge1[b].len().min(wedge2[b].len()))
        .min()
        .expect("B2 non-empty");
    let product_ok = b2
        .iter()
        .all(|b| (wedge1[b].len() * wedge2[b].len()) as u64 == t.sets.intersections[b]);
    let wedge_ok = b2.iter().all(|b| {
        wedge1[b].iter().all(|x| a1b[b].contains(x) && x1s.contains(x))
            && a1b[b].iter().filter(|&x| x1s.contains(x)).count() == wedge1[b].len()
    });
    t.push(
        Stage::new(
            "intersection_components",
            "|A^i_b ∩ A^i_*| >> n^(1-4d)",
            min_wedge as f64,
            Some(pw(1.0 - 4.0 * d)),
        )
        .check("intersection_is_product", product_ok)
        .check("components_exact", wedge_ok),
    );

    // doubling of each piece via the dummy-set inequality with k = 2
    let mut doubling = 0usize;
    let mut doubling_ok = true;
    for &b in &b1 {
        let (x, y) = (&a1b[&b], &a2b[&b]);
        let by = dilate(b, y)?;
        doubling = doubling.max(sumset(x, x)?.len()).max(sumset(y, y)?.len());
        doubling_ok &= plunnecke_holds(&by, &[x, x])?;
        doubling_ok &= plunnecke_holds(x, &[&by, &by])?;
    }
    t.push(
        Stage::new("doubling", "|A^i_b + A^i_b| << n^(1+11d)", doubling as f64, Some(pw(1.0 + 11.0 * d)))
            .check("plunnecke_k2", doubling_ok),
    );

    // |b_* A2_* + b A2_*| through the chain of dummy sets b_* A2_∧ and b A2_∧
    let mut chain_max = 0usize;
    let mut chain_ok = true;
    for &b in &b2 {
        let w = &wedge2[&b];
        let s_a2b = dilate(b_star, &a2b[&b])?;
        let b_a2b = dilate(b, &a2b[&b])?;
        let s_w = dilate(b_star, w)?;
        let b_w = dilate(b, w)?;
        let s_x2 = dilate(b_star, x2s)?;
        let b_x2 = dilate(b, x2s)?;
        chain_ok &= plunnecke_holds(&s_w, &[&s_a2b, &b_a2b])?;
        chain_ok &= plunnecke_holds(&s_w, &[&s_x2, &b_a2b])?;
        chain_ok &= plunnecke_holds(&b_w, &[&s_x2, &b_x2])?;
        chain_max = chain_max.max(sumset(&s_x2, &b_x2)?.len());
    }
    t.push(
        Stage::new(
            "dilate_sumsets",
            "|b_* A2_* + b A2_*| << n^(1+59d)",
            chain_max as f64,
            Some(pw(1.0 + 59.0 * d)),
        )
        .check("plunnecke_chain", chain_ok),
    );

    // X = A2_*, Y = b_*^-1 B2, K = max |X + yX|
    let x = x2s.clone();
    let inv_star = f.inv(b_star)?;
    let y = ElementSet::new(f, b2.iter().map(|&b| f.mul(inv_star, b)));
    let mut k = 0usize;
    for yy in y.iter() {
        k = k.max(sumset(&x, &dilate(yy, &x)?)?.len());
    }
    t.sets.x = vec(&x);
    t.sets.y = vec(&y);
    t.sets.k = Some(k);
    t.push(
        Stage::new("k_max", "K = max |X + yX| << n^(1+59d)", k as f64, Some(pw(1.0 + 59.0 * d)))
            .size("x", x.len())
            .size("y", y.len())
            .check("k_matches_chain", k == chain_max),
    );

    // solutions of x2 + y x1' = x2' + y x1 and the Cauchy-Schwarz lower bound
    let mut energy = 0u64;
    for yy in y.iter() {
        energy += representation_count_scaled(&x, yy, &x)?.energy();
    }
    let (xl, yl) = (x.len() as u128, y.len() as u128);
    let lower = yl * xl.pow(4);
    t.sets.pair_solutions = Some(energy);
    t.push(
        Stage::new(
            "energy",
            "solutions >= |Y||X|^4 / K",
            energy as f64,
            Some(lower as f64 / k as f64),
        )
        .check("cauchy_schwarz", energy as u128 * k as u128 >= lower),
    );

    // the translate pair (x1~, x2~) with the most solutions of x2 - x2~ = y(x1 - x1~)
    let xs = x.as_slice();
    let anchor_pairs: Vec<(u64, u64)> = xs.iter().flat_map(|&a| xs.iter().map(move |&b| (a, b))).collect();
    let anchor_counts: Vec<u64> = anchor_pairs
        .par_iter()
        .map(|&(t1, t2)| {
            y.iter()
                .map(|yy| {
                    xs.iter()
                        .filter(|&&x1| x.contains(f.add(t2, f.mul(yy, f.sub(x1, t1)))))
                        .count() as u64
                })
                .sum()
        })
        .collect();
    let best = argmax_by_key(&anchor_counts, |&c| c).expect("X non-empty");
    let (t1, t2) = anchor_pairs[best];
    let on_lines = anchor_counts[best];
    let x1 = translate(f.neg(t1), &x);
    let x2 = translate(f.neg(t2), &x);
    let hits: Vec<(u64, u64)> = y
        .iter()
        .map(|yy| (yy, x1.iter().filter(|&u| x2.contains(f.mul(yy, u))).count() as u64))
        .collect();
    let rich_thr = (params.c_rich * (x.len() * x.len()) as f64 / k as f64).max(1.0);
    let rich_slopes: Vec<u64> = hits.iter().filter(|&&(_, c)| c as f64 >= rich_thr).map(|&(yy, _)| yy).collect();
    let on_rich: u64 = hits.iter().filter(|&&(_, c)| c as f64 >= rich_thr).map(|&(_, c)| c).sum();
    t.sets.x_tilde = Some((t1, t2));
    t.sets.rich_slopes = rich_slopes.clone();
    t.push(
        Stage::new(
            "slope_lines",
            "incidences of slopes Y with X1 × X2 >= |Y||X|^2 / K",
            on_lines as f64,
            Some((yl * xl * xl) as f64 / k as f64),
        )
        .size("rich_slopes", rich_slopes.len())
        .size("incidences_on_rich", on_rich as usize)
        .check("anchor_sum_identity", anchor_counts.iter().sum::<u64>() == energy)
        .check("incidence_identity", hits.iter().map(|&(_, c)| c).sum::<u64>() == on_lines),
    );
    if rich_slopes.is_empty() {
        return Ok(t.truncate("slope_lines"));
    }

    // the vertical u_* × X2 crossed by the most rich slope lines
    let us: Vec<u64> = x1.iter().filter(|&u| u != 0).collect();
    let section = |u: u64| rich_slopes.iter().filter(|&&yy| x2.contains(f.mul(yy, u))).count();
    let Some(ui) = argmax_by_key(&us, |&u| section(u)) else {
        t.push(Stage::new("vertical_section", "|Y1| >> |Y||X| / K", 0.0, None));
        return Ok(t.truncate("vertical_section"));
    };
    let u_star = us[ui];
    let y1 = ElementSet::new(
        f,
        rich_slopes.iter().map(|&yy| f.mul(yy, u_star)).filter(|&v| x2.contains(v)),
    );
    let u_y = dilate(u_star, &y)?;
    let orig = dilate(f.mul(u_star, inv_star), &ElementSet::new(f, b2.iter().copied()))?;
    t.sets.u_star = Some(u_star);
    t.sets.y1 = vec(&y1);
    t.push(
        Stage::new(
            "vertical_section",
            "|Y1| >> |Y||X| / K",
            y1.len() as f64,
            Some((yl * xl) as f64 / k as f64),
        )
        .check("y1_in_x2_and_uy", y1.is_subset(&x2) && y1.is_subset(&u_y))
        .check("y1_in_dilate_and_translate", y1.is_subset(&orig) && y1.is_subset(&translate(f.neg(t2), x2s))),
    );
    if y1.len() < 2 {
        return Ok(t.truncate("vertical_section"));
    }
    t.push(Stage::new("y1_size", "|Y1| >> n^(1-65d)", y1.len() as f64, Some(pw(1.0 - 65.0 * d))));

    // Case split on the ratio set
    let split = case_split(&y1)?;
    let m1 = y1.len();
    t.sets.case = Some(split.clone());
    t.push(
        Stage::new("ratio_set", "|R| vs |Y1|^2", split.ratio_set_size as f64, Some((m1 * m1) as f64))
            .size("ratio_set", split.ratio_set_size)
            .size("case", if split.tag == CaseTag::CaseI { 1 } else { 2 })
            .check(
                "case_consistent",
                (split.tag == CaseTag::CaseI) == is_case_one(split.ratio_set_size, m1, p),
            )
            .check("sq_certificate", split.certificate_holds()),
    );
    let (Some(xi), Some([qp, qq, qs, qt]), Some(r)) = (split.xi, split.quadruple, split.r) else {
        return Ok(t.truncate("ratio_set"));
    };

    // covering b·Y1 by translates of A1_∧ for each b in B2
    let mut cover_max = 0usize;
    let mut cover_ok = true;
    let mut cover_chain_ok = true;
    for &b in &b2 {
        let by1 = dilate(b, &y1)?;
        let w1 = &wedge1[&b];
        let w2 = &wedge2[&b];
        let res = covering_translates(&by1, w1, params.eps_cover)?;
        cover_max = cover_max.max(res.offsets.len());
        cover_ok &= res.covered_fraction >= 1.0 - params.eps_cover;
        let bx2 = dilate(b, x2s)?;
        cover_chain_ok &= sumset(w1, &by1)?.len() <= sumset(w1, &bx2)?.len();
        cover_chain_ok &= plunnecke_holds(&dilate(b, w2)?, &[w1, &bx2])?;
    }
    t.push(
        Stage::new("covering", "translates covering b Y1 << n^(24d)", cover_max as f64, Some(pw(24.0 * d)))
            .check("coverage_reached", cover_ok)
            .check("covering_chain", cover_chain_ok),
    );

    // Y1' and A2~: the halves covered first by translates of A1_* + A1_*
    let a1_double = sumset(x1s, x1s)?;
    let (y1p, n_y) = half_by_covering(&y1, f.sub(qp, qq), &a1_double, params.eps_cover)?;
    let (a2t, n_a) = half_by_covering(x2s, f.sub(qs, qt), &a1_double, params.eps_cover)?;
    t.sets.y1_prime = vec(&y1p);
    t.sets.a2_tilde = vec(&a2t);
    t.push(
        Stage::new(
            "positive_proportion",
            "translates of A1_* + A1_* covering (p-q)Y1', (s-t)A2~ << n^(48d)",
            n_y.max(n_a) as f64,
            Some(pw(48.0 * d)),
        )
        .size("y1_prime", y1p.len())
        .size("a2_tilde", a2t.len())
        .check("y1_prime_half", y1p.is_subset(&y1) && 2 * y1p.len() >= y1.len())
        .check("a2_tilde_half", a2t.is_subset(x2s) && 2 * a2t.len() >= x2s.len()),
    );

    let m1p = y1p.len();
    let r_y1p = dilate(r, &y1p)?;
    let xi_y1p = dilate(xi, &y1p)?;
    let sq = sumset(&y1p, &xi_y1p)?.len();
    match split.tag {
        CaseTag::CaseII => {
            let triple = iterated_sumset(&[&y1p, &y1p, &r_y1p])?.len();
            t.push(
                Stage::new(
                    "single_realisation",
                    "|Y1|^2 << |Y1' + xi Y1'| <= |Y1' + Y1' + r Y1'|",
                    triple as f64,
                    Some((m1 * m1) as f64),
                )
                .size("sq", sq)
                .check("sq_exact", sq == m1p * m1p)
                .check("sq_below_triple", sq <= triple),
            );
            let y1p2 = sumset(&y1p, &y1p)?;
            let tail = sumset(&a2t, &r_y1p)?.len();
            let triple_a2 = iterated_sumset(&[x2s, x2s, x2s])?.len();
            let quad_a1 = iterated_sumset(&[x1s, x1s, x1s, x1s])?.len();
            t.push(
                Stage::new(
                    "plunnecke_chain",
                    "|A2~ + r Y1'| << n^(1+119d)",
                    tail as f64,
                    Some(pw(1.0 + 119.0 * d)),
                )
                .size("a2_star_triple", triple_a2)
                .size("a1_star_quadruple", quad_a1)
                .check("plunnecke_dummy_a2_tilde", plunnecke_holds(&a2t, &[&y1p2, &r_y1p])?),
            );
            t.push(Stage::new(
                "final_bound",
                "|Y1'|^2 << n^(1+137d)",
                (m1p * m1p) as f64,
                Some(pw(1.0 + 137.0 * d)),
            ));
        }
        CaseTag::CaseI => {
            t.push(
                Stage::new(
                    "single_realisation",
                    "|Y1' + xi Y1'| >> |Y1'|^2",
                    sq as f64,
                    Some((m1p * m1p) as f64),
                )
                .size("sq", sq),
            );
            let tail = sumset(&a2t, &r_y1p)?.len();
            t.push(
                Stage::new("plunnecke_chain", "|A2~ + r Y1'|", tail as f64, None)
                    .check("plunnecke_dummy_a2_tilde", plunnecke_holds(&a2t, &[&y1p, &r_y1p])?),
            );
            t.push(Stage::new("final_bound", "|Y1'|^2", (m1p * m1p) as f64, None));
        }
    }
    Ok(t)
}

/// Typed intermediate sets of an incidence run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IncidenceSets {
    pub erased: Vec<ProjPoint>,
    pub p1: Vec<ProjPoint>,
    /// Sizes of L_i and P_(i+1) for each refinement round.
    pub refinement: Vec<(usize, usize)>,
    pub l1: Vec<ProjLine>,
    pub p2: Vec<ProjPoint>,
    /// (p, |P_p|) for p in P2
    pub neighborhood_sizes: Vec<(ProjPoint, usize)>,
    pub pair: Option<(ProjPoint, ProjPoint)>,
    pub p3: Vec<ProjPoint>,
    pub map: Option<[[u64; 3]; 3]>,
    pub dropped_at_infinity: usize,
    pub grid_a: Vec<u64>,
    pub grid_b: Vec<u64>,
    pub grid_incidences: Option<u64>,
    pub handoff_triples: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncidenceTrace {
    pub schema_version: u32,
    pub prime: u64,
    pub n: usize,
    pub params: IncidenceParams,
    /// n² < p
    pub in_range: bool,
    pub size_ok: bool,
    pub incidences: u64,
    /// From I(P, L) = n^(3/2 - ε); `None` when there are no incidences.
    pub epsilon_eff: Option<f64>,
    /// δ/(40 - 2δ) for the configured δ.
    pub epsilon_from_delta: f64,
    pub stages: Vec<Stage>,
    pub sets: IncidenceSets,
    pub beck: Option<Box<BeckTrace>>,
    pub outcome: Outcome,
}

impl IncidenceTrace {
    pub fn is_complete(&self) -> bool {
        self.outcome == Outcome::Completed
    }

    pub fn truncated_at(&self) -> Option<&str> {
        match &self.outcome {
            Outcome::Completed => None,
            Outcome::EmptyStage { stage } => Some(stage),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.stage_name == name)
    }

    /// Failed checks of this trace and of the nested Beck trace.
    pub fn failed_checks(&self) -> Vec<String> {
        let mut out = failed(&self.stages);
        if let Some(b) = &self.beck {
            out.extend(b.failed_checks().into_iter().map(|c| format!("beck/{c}")));
        }
        out
    }

    pub fn checks_hold(&self) -> bool {
        self.failed_checks().is_empty()
    }

    fn truncate(mut self, stage: &str) -> Self {
        self.outcome = Outcome::EmptyStage {
            stage: stage.to_string(),
        };
        self
    }
}

/// Point-line incidence structure restricted to subsets by index.
struct Incidences {
    /// on[i] = indices of lines through point i
    on: Vec<Vec<usize>>,
    /// through[j] = indices of points on line j
    through: Vec<Vec<usize>>,
}

impl Incidences {
    fn new(f: &PrimeField, points: &[ProjPoint], lines: &[ProjLine]) -> Self {
        let on: Vec<Vec<usize>> = points
            .par_iter()
            .map(|q| {
                lines
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| proj_incident(f, q, l))
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        let mut through = vec![Vec::new(); lines.len()];
        for (i, ls) in on.iter().enumerate() {
            for &j in ls {
                through[j].push(i);
            }
        }
        Incidences { on, through }
    }

    fn point_degree(&self, i: usize, lines: &BTreeSet<usize>) -> usize {
        self.on[i].iter().filter(|j| lines.contains(j)).count()
    }

    fn line_degree(&self, j: usize, points: &BTreeSet<usize>) -> usize {
        self.through[j].iter().filter(|i| points.contains(i)).count()
    }

    fn count(&self, points: &BTreeSet<usize>, lines: &BTreeSet<usize>) -> u64 {
        points.iter().map(|&i| self.point_degree(i, lines) as u64).sum()
    }
}

/// Replays the incidence argument on (P, L) ⊂ P²(F_p).
pub fn run_incidence_pipeline(
    points: &ProjPointSet,
    lines: &ProjLineSet,
    params: &IncidenceParams,
) -> Result<IncidenceTrace> {
    params.validate()?;
    let f = *points.field();
    if lines.field() != &f {
        return Err(Error::ModulusMismatch(f.modulus(), lines.field().modulus()));
    }
    let n = points.len();
    if lines.len() != n {
        return Err(Error::InvalidParameter(format!(
            "|P| = {} and |L| = {} differ",
            n,
            lines.len()
        )));
    }
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let eps = params.epsilon;
    let nf = n as f64;
    let pw = |e: f64| nf.powf(e);
    let pts = points.items();
    let lns = lines.items();
    let inc = Incidences::new(&f, pts, lns);
    let all_points: BTreeSet<usize> = (0..n).collect();
    let all_lines: BTreeSet<usize> = (0..n).collect();
    let total = inc.count(&all_points, &all_lines);
    let epsilon_eff = (total > 0).then(|| 1.5 - (total as f64).ln() / nf.ln());
    let mut t = IncidenceTrace {
        schema_version: TRACE_SCHEMA_VERSION,
        prime: f.modulus(),
        n,
        params: *params,
        in_range: (n as u64) * (n as u64) < f.modulus(),
        size_ok: n >= 4,
        incidences: total,
        epsilon_eff,
        epsilon_from_delta: epsilon_from_delta(params.beck.delta),
        stages: Vec::new(),
        sets: IncidenceSets::default(),
        beck: None,
        outcome: Outcome::Completed,
    };
    t.stages.push(
        Stage::new("incidences", "I(P, L) ~ n^(3/2-e)", total as f64, Some(pw(1.5 - eps)))
            .check("bucketed_count_agrees", count_proj_incidences(points, lines) == total),
    );

    // erase points on too many lines
    let erase_thr = params.c_erase * pw(0.5 + eps);
    let erased: BTreeSet<usize> = (0..n).filter(|&i| inc.on[i].len() as f64 > erase_thr).collect();
    let kept: BTreeSet<usize> = all_points.difference(&erased).copied().collect();
    let i_plus = inc.count(&erased, &all_lines);
    let sq_deg: u128 = erased.iter().map(|&i| (inc.on[i].len() as u128).pow(2)).sum();
    t.sets.erased = erased.iter().map(|&i| pts[i]).collect();
    t.stages.push(
        Stage::new(
            "erasure",
            "I(P+, L) << n^2 / (C n^(1/2+e))",
            i_plus as f64,
            Some(nf * nf / erase_thr),
        )
        .size("erased", erased.len())
        .check("degree_square_bound", sq_deg <= i_plus as u128 + (n as u128) * (n as u128 - 1))
        .check("threshold_bound", i_plus as f64 * erase_thr <= sq_deg as f64),
    );

    // popular points, then alternating refinement of lines and points
    let pop = params.c_pop * pw(0.5 - eps);
    let p1: BTreeSet<usize> = kept
        .iter()
        .copied()
        .filter(|&i| inc.on[i].len() as f64 >= pop)
        .collect();
    let i_kept = inc.count(&kept, &all_lines);
    let i_p1 = inc.count(&p1, &all_lines);
    t.sets.p1 = p1.iter().map(|&i| pts[i]).collect();
    t.stages.push(
        Stage::new("popular_points", "I(P1, L) ~ n^(3/2-e)", i_p1 as f64, Some(pw(1.5 - eps)))
            .size("p1", p1.len())
            .check("loss_below_threshold", (i_kept - i_p1) as f64 <= kept.len() as f64 * pop)
            .check("p1_subset_kept", p1.is_subset(&kept)),
    );
    if p1.is_empty() {
        return Ok(t.truncate("popular_points"));
    }

    let mut cur_points = p1.clone();
    let mut cur_lines = all_lines.clone();
    for _ in 0..params.refine_depth {
        cur_lines = (0..n).filter(|&j| inc.line_degree(j, &cur_points) as f64 >= pop).collect();
        cur_points = cur_points
            .iter()
            .copied()
            .filter(|&i| inc.point_degree(i, &cur_lines) as f64 >= pop)
            .collect();
        t.sets.refinement.push((cur_lines.len(), cur_points.len()));
    }
    let (l1, p2) = (cur_lines, cur_points);
    t.sets.l1 = l1.iter().map(|&j| lns[j]).collect();
    t.sets.p2 = p2.iter().map(|&i| pts[i]).collect();
    let i_l1 = inc.count(&p1, &l1);
    t.stages.push(
        Stage::new("popular_lines", "I(P1, L1) ~ n^(3/2-e)", i_l1 as f64, Some(pw(1.5 - eps))).size("l1", l1.len()),
    );
    t.stages.push(
        Stage::new("refined_points", "|P2| >> n^(1-2e)", p2.len() as f64, Some(pw(1.0 - 2.0 * eps)))
            .size("p2", p2.len())
            .check("p2_subset_p1", p2.is_subset(&p1))
            .check("p2_avoids_erased", p2.is_disjoint(&erased)),
    );
    if p2.len() < 2 {
        return Ok(t.truncate("refined_points"));
    }

    // P_q: points of P1 other than q joined to q by a line of L1
    let hood: BTreeMap<usize, BTreeSet<usize>> = p2
        .iter()
        .map(|&q| {
            let set = inc.on[q]
                .iter()
                .filter(|j| l1.contains(j))
                .flat_map(|&j| inc.through[j].iter().copied())
                .filter(|&i| i != q && p1.contains(&i))
                .collect();
            (q, set)
        })
        .collect();
    let min_hood = hood.values().map(|s| s.len()).min().unwrap_or(0);
    let sum_hood: u128 = hood.values().map(|s| s.len() as u128).sum();
    let p2v: Vec<usize> = p2.iter().copied().collect();
    let mut pair_sum: u128 = 0;
    let mut cand: Vec<((usize, usize), usize)> = Vec::new();
    for &qa in &p2v {
        for &qb in &p2v {
            let c = hood[&qa].intersection(&hood[&qb]).count();
            pair_sum += c as u128;
            if qb > qa {
                cand.push(((qa, qb), c));
            }
        }
    }
    t.sets.neighborhood_sizes = hood.iter().map(|(&q, s)| (pts[q], s.len())).collect();
    t.stages.push(
        Stage::new("neighborhoods", "|P_p| >> n^(1-2e)", min_hood as f64, Some(pw(1.0 - 2.0 * eps)))
            .check("cauchy_schwarz", sum_hood * sum_hood <= p1.len() as u128 * pair_sum),
    );

    let best = argmax_by_key(&cand, |&(_, c)| c).expect("|P2| >= 2");
    let ((ia, ib), _) = cand[best];
    let (pbar, ptil) = (pts[ia], pts[ib]);
    let p3: BTreeSet<usize> = hood[&ia].intersection(&hood[&ib]).copied().collect();
    t.sets.pair = Some((pbar, ptil));
    t.sets.p3 = p3.iter().map(|&i| pts[i]).collect();
    t.stages.push(
        Stage::new("pair", "|P3| >> n^(1-4e)", p3.len() as f64, Some(pw(1.0 - 4.0 * eps)))
            .check("p3_subset_p1", p3.is_subset(&p1))
            .check(
                "p3_is_intersection",
                p3.iter().all(|i| hood[&ia].contains(i) && hood[&ib].contains(i)),
            ),
    );
    if p3.is_empty() {
        return Ok(t.truncate("pair"));
    }

    // send pbar, ptil to infinity; P3 lands in a grid A × B
    let map = map_to_infinity(&f, &pbar, &ptil)?;
    let mapped: Vec<Option<AffinePoint>> = p3.iter().map(|&i| map.apply(&pts[i]).to_affine(&f)).collect();
    let dropped = mapped.iter().filter(|m| m.is_none()).count();
    let affine: Vec<AffinePoint> = mapped.iter().flatten().copied().collect();
    let ga: Vec<u64> = affine.iter().map(|q| q.x).collect::<BTreeSet<_>>().into_iter().collect();
    let gb: Vec<u64> = affine.iter().map(|q| q.y).collect::<BTreeSet<_>>().into_iter().collect();
    let deg_bar = inc.point_degree(ia, &l1);
    let deg_til = inc.point_degree(ib, &l1);
    let infinity_ok = map.apply(&pbar) == ProjPoint { x: 0, y: 1, z: 0 } && map.apply(&ptil) == ProjPoint { x: 1, y: 0, z: 0 };
    t.sets.map = Some(map.matrix);
    t.sets.dropped_at_infinity = dropped;
    t.sets.grid_a = ga.clone();
    t.sets.grid_b = gb.clone();
    t.stages.push(
        Stage::new(
            "projective_map",
            "|A|, |B| << n^(1/2+e)",
            ga.len().max(gb.len()) as f64,
            Some(pw(0.5 + eps)),
        )
        .size("a", ga.len())
        .size("b", gb.len())
        .size("dropped_at_infinity", dropped)
        .check("pair_sent_to_infinity", infinity_ok)
        .check("a_bounded_by_degree", ga.len() <= deg_bar)
        .check("b_bounded_by_degree", gb.len() <= deg_til),
    );
    if affine.is_empty() {
        return Ok(t.truncate("projective_map"));
    }

    // I(P3, L), before and after the map
    let i_p3 = inc.count(&p3, &all_lines);
    let mapped_points = ProjPointSet::new(f, p3.iter().map(|&i| map.apply(&pts[i])));
    let mapped_lines = ProjLineSet::new(f, lns.iter().map(|l| map.apply_line(l)));
    t.sets.grid_incidences = Some(i_p3);
    t.stages.push(
        Stage::new("grid_incidences", "I(P3, L) >> n^(3/2-5e)", i_p3 as f64, Some(pw(1.5 - 5.0 * eps)))
            .check("map_preserves_incidences", count_proj_incidences(&mapped_points, &mapped_lines) == i_p3),
    );

    // collinear triples of A × B on lines of L
    let grid = cartesian_product(f, &ga, &gb);
    let in_grid = affine.iter().all(|q| grid.contains(q));
    let mut triples = 0u64;
    for l in mapped_lines.iter().filter_map(|l| l.to_affine()) {
        let k = grid.iter().filter(|&&q| crate::geometry::on_line(&f, q, &l)).count() as u64;
        triples += k * k.saturating_sub(1) * k.saturating_sub(2);
    }
    let al = ga.len() as f64;
    t.sets.handoff_triples = Some(triples);
    t.stages.push(
        Stage::new(
            "collinear_handoff",
            "triples of A × B on lines of L >> n^(5/2-15e)",
            triples as f64,
            Some(pw(2.5 - 15.0 * eps)),
        )
        .size("grid", grid.len())
        .check("p3_inside_grid", in_grid)
        .size(
            "a_power_floor",
            al.powf(5.0 - 40.0 * eps / (1.0 + 2.0 * eps)).floor() as usize,
        ),
    );

    // continue with the Beck replay on a square sub-grid
    let m = ga.len().min(gb.len());
    if m < 2 {
        t.stages.push(Stage::new("beck_handoff", "delta_eff of the square sub-grid", 0.0, None).size("side", m));
        return Ok(t.truncate("beck_handoff"));
    }
    let sa = ElementSet::new(f, ga.iter().take(m).copied());
    let sb = ElementSet::new(f, gb.iter().take(m).copied());
    let beck = run_beck_pipeline(&sa, &sb, &params.beck)?;
    t.stages.push(
        Stage::new(
            "beck_handoff",
            "delta_eff of the square sub-grid vs delta",
            beck.delta_eff,
            Some(params.beck.delta),
        )
        .size("side", m)
        .size("beck_complete", beck.is_complete() as usize),
    );
    t.beck = Some(Box::new(beck));

    let eps_eff = t.epsilon_eff.unwrap_or(0.0);
    t.stages.push(
        Stage::new(
            "exponent_relation",
            "epsilon_eff vs d/(40-2d)",
            eps_eff,
            Some(t.epsilon_from_delta),
        )
        .check(
            "relation_exact",
            epsilon_from_delta_exact(Ratio::new(1, 267)) == Ratio::new(1, 10678),
        ),
    );
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::make_field;
    use crate::geometry::{all_proj_lines, all_proj_points};

    fn field(p: u64) -> PrimeField {
        make_field(p).unwrap()
    }

    fn interval(p: u64, n: usize) -> ElementSet {
        ElementSet::interval(field(p), 0, n)
    }

    fn exploring() -> BeckParams {
        BeckParams {
            c_rich: 0.1,
            c_pop: 0.05,
            ..BeckParams::default()
        }
    }

    fn brute_bssetup(a1: &ElementSet, b: u64) -> u64 {
        let f = *a1.field();
        let target = dilate(f.add(1, b), a1).unwrap();
        let mut c = 0;
        for x1 in a1.iter() {
            for x2 in a1.iter() {
                if target.contains(f.add(x1, f.mul(b, x2))) {
                    c += 1;
                }
            }
        }
        c
    }

    #[test]
    fn bssetup_examples() {
        let a = interval(101, 10);
        // b = 1: x1 + x2 ∈ 2·A1
        let direct = a
            .iter()
            .flat_map(|x| a.iter().map(move |y| x + y))
            .filter(|s| s % 2 == 0 && s / 2 < 10)
            .count() as u64;
        assert_eq!(solutions_bssetup(&a, 1).unwrap(), direct);
        let single = ElementSet::new(field(101), [7]);
        for b in 1..100 {
            assert!(solutions_bssetup(&single, b).unwrap() <= 1);
            assert!(solutions_bssetup(&a, b).unwrap() <= 100);
            assert_eq!(solutions_bssetup(&a, b).unwrap(), brute_bssetup(&a, b));
        }
        assert_eq!(solutions_bssetup(&a, 0), Err(Error::BadSlope(0)));
        assert_eq!(solutions_bssetup(&a, 100), Err(Error::BadSlope(100)));
    }

    #[test]
    fn epsilon_examples() {
        assert_eq!(epsilon_from_delta_exact(Ratio::new(1, 267)), Ratio::new(1, 10678));
        assert_eq!(epsilon_from_delta_exact(Ratio::from_integer(1)), Ratio::new(1, 38));
        assert_eq!(epsilon_from_delta_exact(Ratio::from_integer(0)), Ratio::from_integer(0));
        assert!((epsilon_from_delta(1.0 / 267.0) - 1.0 / 10678.0).abs() < 1e-15);
        assert!(epsilon_from_delta(1e-12) < 1e-13);
    }

    #[test]
    fn case_split_examples() {
        let c = case_split(&interval(7, 3)).unwrap();
        assert_eq!(c.tag, CaseTag::CaseI);
        assert_eq!(c.ratio_set_size, 7);

        let y = interval(101, 2);
        let c = case_split(&y).unwrap();
        assert_eq!(c.tag, CaseTag::CaseII);
        assert_eq!(c.ratio_set_size, 3);
        let xi = c.xi.unwrap();
        assert!(![0, 1, 100].contains(&xi));
        assert_eq!(sumset(&y, &dilate(xi, &y).unwrap()).unwrap().len(), 4);
        assert!(c.certificate_holds());
    }

    #[test]
    fn case_two_certificates_exact_on_random_sets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let f = field(1009);
        for _ in 0..40 {
            let k = rng.gen_range(2..7);
            let y = ElementSet::new(f, (0..k).map(|_| rng.gen_range(0..1009)));
            if y.len() < 2 {
                continue;
            }
            let c = case_split(&y).unwrap();
            if c.tag == CaseTag::CaseII {
                let xi = c.xi.unwrap();
                assert!(!ratio_set(&y).unwrap().contains(xi));
                assert_eq!(c.sq_size, Some(y.len() * y.len()));
                let [p, q, s, tt] = c.quadruple.unwrap();
                assert_eq!(f.add(quotient(&f, [p, q, s, tt]), 1), xi);
            }
        }
    }

    /// #{(x1, x2, x3, y1, y2, y3) : y1 != y2, det = 0} by brute force.
    fn det_count_distinct(a1: &ElementSet, a2: &ElementSet) -> u64 {
        let f = *a1.field();
        let mut c = 0;
        for y1 in a2.iter() {
            for y2 in a2.iter().filter(|&y| y != y1) {
                for y3 in a2.iter() {
                    for x1 in a1.iter() {
                        for x2 in a1.iter() {
                            for x3 in a1.iter() {
                                let det = f.sub(
                                    f.add(f.add(f.mul(x2, y3), f.mul(x1, y2)), f.mul(x3, y1)),
                                    f.add(f.add(f.mul(x3, y2), f.mul(x1, y3)), f.mul(x2, y1)),
                                );
                                if det == 0 {
                                    c += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        c
    }

    #[test]
    fn fixed_pair_counts_sum_to_det_count() {
        let f = field(31);
        let a1 = ElementSet::new(f, [0, 1, 3, 7]);
        let a2 = ElementSet::new(f, [2, 5, 6, 11]);
        let t = run_beck_pipeline(&a1, &a2, &exploring()).unwrap();
        let (y1, y2) = t.sets.y_pair.unwrap();
        // recompute every pair and compare the ordered total with brute force
        let mut total = 0;
        for u in a2.iter() {
            for v in a2.iter().filter(|&v| v != u) {
                let mut c = 0;
                for y3 in a2.iter() {
                    let tt = f.div(f.sub(y3, u), f.sub(v, u)).unwrap();
                    for x1 in a1.iter() {
                        for x2 in a1.iter() {
                            if a1.contains(f.add(f.mul(x1, f.sub(1, tt)), f.mul(x2, tt))) {
                                c += 1;
                            }
                        }
                    }
                }
                if (u, v) == (y1, y2) {
                    assert_eq!(Some(c), t.sets.fixed_pair_solutions);
                }
                total += c;
            }
        }
        assert_eq!(total, det_count_distinct(&a1, &a2));
    }

    #[test]
    fn interval_run_completes_with_exploration_constants() {
        let a = interval(1009, 16);
        let t = run_beck_pipeline(&a, &a, &exploring()).unwrap();
        assert!(t.is_complete(), "truncated at {:?}", t.truncated_at());
        assert!(t.checks_hold(), "{:?}", t.failed_checks());
        assert!(t.sets.case.is_some());
        for s in &t.stages {
            if let (Some(p), Some(r)) = (s.predicted, s.ratio) {
                assert!(p > 0.0 && r.is_finite(), "{}", s.stage_name);
            }
        }
        let names: Vec<&str> = t.stages.iter().map(|s| s.stage_name.as_str()).collect();
        assert_eq!(names, BECK_STAGES.to_vec());
        assert_eq!(t.verdict, 267.0 * t.delta_eff >= 1.0);
    }

    #[test]
    fn default_constants_either_complete_or_truncate_cleanly() {
        let a = interval(1009, 16);
        let t = run_beck_pipeline(&a, &a, &BeckParams::default()).unwrap();
        assert!(t.checks_hold(), "{:?}", t.failed_checks());
        let names: Vec<&str> = t.stages.iter().map(|s| s.stage_name.as_str()).collect();
        assert_eq!(names, BECK_STAGES[..names.len()].to_vec());
        if let Some(stage) = t.truncated_at() {
            assert_eq!(stage, *names.last().unwrap());
        }
    }

    #[test]
    fn geometric_progression_run() {
        let f = field(1009);
        let g = ElementSet::new(f, (0..16).map(|i| f.pow(2, i)));
        assert_eq!(g.len(), 16);
        let t = run_beck_pipeline(&g, &g, &exploring()).unwrap();
        assert!(t.checks_hold(), "{:?}", t.failed_checks());
        assert!(t.verdict);
    }

    #[test]
    fn degenerate_pair_truncates_at_rich_lines() {
        let a = interval(11, 2);
        let t = run_beck_pipeline(&a, &a, &BeckParams::default()).unwrap();
        assert_eq!(t.truncated_at(), Some("rich_lines"));
        assert_eq!(t.sets.rich_threshold, Some(3));
        assert!(!t.size_ok);
        assert_eq!(t.lines, 6);
    }

    #[test]
    fn beck_runs_are_deterministic() {
        let a = interval(1009, 12);
        let p = exploring();
        let x = serde_json::to_string(&run_beck_pipeline(&a, &a, &p).unwrap()).unwrap();
        let y = serde_json::to_string(&run_beck_pipeline(&a, &a, &p).unwrap()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn beck_rejects_bad_input() {
        let a = interval(101, 4);
        let b = interval(101, 5);
        assert!(run_beck_pipeline(&a, &b, &BeckParams::default()).is_err());
        let bad = BeckParams {
            delta: 1.5,
            ..BeckParams::default()
        };
        assert!(run_beck_pipeline(&a, &a, &bad).is_err());
        assert_eq!(
            run_beck_pipeline(&interval(101, 1), &interval(101, 1), &BeckParams::default()),
            Err(Error::SetTooSmall { needed: 2, got: 1 })
        );
    }

    #[test]
    fn full_plane_records_incidences() {
        let f = field(7);
        let pts = ProjPointSet::new(f, all_proj_points(&f));
        let lns = ProjLineSet::new(f, all_proj_lines(&f));
        let t = run_incidence_pipeline(&pts, &lns, &IncidenceParams::default()).unwrap();
        assert_eq!(t.n, 57);
        assert_eq!(t.incidences, 456);
        assert!(!t.in_range);
        assert!(t.checks_hold(), "{:?}", t.failed_checks());
    }

    /// Grid {0..k-1}² with its rows, columns and a few diagonals, plus the
    /// two points at infinity of the axis directions.
    fn grid_instance(p: u64, k: i64) -> (ProjPointSet, ProjLineSet) {
        let f = field(p);
        let mut pts: Vec<ProjPoint> = Vec::new();
        for x in 0..k {
            for y in 0..k {
                pts.push(ProjPoint::new(&f, x, y, 1).unwrap());
            }
        }
        pts.push(ProjPoint::new(&f, 1, 0, 0).unwrap());
        pts.push(ProjPoint::new(&f, 0, 1, 0).unwrap());
        let mut lns: Vec<ProjLine> = Vec::new();
        for c in 0..k {
            lns.push(ProjLine::new(&f, 1, 0, -c).unwrap());
            lns.push(ProjLine::new(&f, 0, 1, -c).unwrap());
        }
        let mut c = 0;
        while lns.len() < pts.len() {
            // x - y + c = 0 and x + y - c = 0
            lns.push(ProjLine::new(&f, 1, -1, c).unwrap());
            if lns.len() < pts.len() {
                lns.push(ProjLine::new(&f, 1, 1, -c).unwrap());
            }
            c += 1;
        }
        (ProjPointSet::new(f, pts), ProjLineSet::new(f, lns))
    }

    #[test]
    fn grid_instance_runs_to_the_beck_handoff() {
        let (pts, lns) = grid_instance(499, 5);
        assert_eq!(pts.len(), lns.len());
        let params = IncidenceParams {
            c_erase: 4.0,
            c_pop: 0.3,
            beck: exploring(),
            ..IncidenceParams::default()
        };
        let t = run_incidence_pipeline(&pts, &lns, &params).unwrap();
        assert!(t.checks_hold(), "{:?}", t.failed_checks());
        assert!(t.is_complete(), "truncated at {:?}", t.truncated_at());
        let names: Vec<&str> = t.stages.iter().map(|s| s.stage_name.as_str()).collect();
        assert_eq!(names, INCIDENCE_STAGES.to_vec());
        let p1: BTreeSet<ProjPoint> = t.sets.p1.iter().copied().collect();
        assert!(t.sets.p2.iter().all(|q| p1.contains(q)));
        assert!(t.sets.p3.iter().all(|q| p1.contains(q)));
        assert!(t.sets.erased.iter().all(|q| !p1.contains(q)));
    }

    #[test]
    fn random_sparse_instances_keep_invariants() {
        use rand::{Rng, SeedableRng};
        let f = field(499);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let mut pts = BTreeSet::new();
            while pts.len() < 20 {
                pts.insert(ProjPoint::new(&f, rng.gen_range(0..499), rng.gen_range(0..499), 1).unwrap());
            }
            let mut lns = BTreeSet::new();
            while lns.len() < 20 {
                lns.insert(ProjLine::new(&f, 1, rng.gen_range(0..499), rng.gen_range(0..499)).unwrap());
            }
            let t = run_incidence_pipeline(
                &ProjPointSet::new(f, pts),
                &ProjLineSet::new(f, lns),
                &IncidenceParams::default(),
            )
            .unwrap();
            assert!(t.checks_hold(), "{:?}", t.failed_checks());
        }
    }
}
