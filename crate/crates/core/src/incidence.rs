//! Spanned lines, incidence counts, rich lines and collinear triples.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::PrimeField;
use crate::geometry::{line_through, on_line, proj_incident, AffinePoint, Line, ProjLine, ProjPoint};

/// Exponent gap in the lines-spanned bound |L(P)| >= c |P|^(1 + 1/267).
pub const BECK_EXPONENT_GAP: f64 = 1.0 / 267.0;
/// Exponent gap in the incidence bound I(P, L) <= C n^(3/2 - 1/10678).
pub const INCIDENCE_EXPONENT_GAP: f64 = 1.0 / 10678.0;

/// A deduplicated, sorted collection of geometric objects over one field.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalSet<T> {
    field: PrimeField,
    items: Vec<T>,
}

pub type PointSet = CanonicalSet<AffinePoint>;
pub type ProjPointSet = CanonicalSet<ProjPoint>;
pub type LineSet = CanonicalSet<Line>;
pub type ProjLineSet = CanonicalSet<ProjLine>;

impl<T: Ord + Copy> CanonicalSet<T> {
    pub fn new(field: PrimeField, items: impl IntoIterator<Item = T>) -> Self {
        let mut items: Vec<T> = items.into_iter().collect();
        items.sort_unstable();
        items.dedup();
        CanonicalSet { field, items }
    }

    pub fn field(&self) -> &PrimeField {
        &self.field
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.items.iter()
    }

    pub fn contains(&self, x: &T) -> bool {
        self.items.binary_search(x).is_ok()
    }

    /// Returns a copy with `x` added.
    pub fn with(&self, x: T) -> Self {
        Self::new(self.field, self.items.iter().copied().chain(std::iter::once(x)))
    }

    pub fn filter(&self, mut keep: impl FnMut(&T) -> bool) -> Self {
        CanonicalSet {
            field: self.field,
            items: self.items.iter().copied().filter(|x| keep(x)).collect(),
        }
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.items.iter().all(|x| other.contains(x))
    }
}

impl<'a, T> IntoIterator for &'a CanonicalSet<T> {
    type Item = &'a T;
    type IntoIter = std::slice::Iter<'a, T>;
    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

/// The grid A1 x A2.
pub fn cartesian_product(field: PrimeField, xs: &[u64], ys: &[u64]) -> PointSet {
    PointSet::new(
        field,
        xs.iter()
            .flat_map(|&x| ys.iter().map(move |&y| AffinePoint { x, y })),
    )
}

/// Spanned line -> number of points of P on it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineMultiplicityMap {
    field: PrimeField,
    counts: BTreeMap<Line, u64>,
}

impl LineMultiplicityMap {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn get(&self, l: &Line) -> Option<u64> {
        self.counts.get(l).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Line, &u64)> {
        self.counts.iter()
    }

    pub fn lines(&self) -> LineSet {
        LineSet::new(self.field, self.counts.keys().copied())
    }

    /// Sum of C(k_l, 2); equals C(|P|, 2).
    pub fn pair_total(&self) -> u64 {
        self.counts.values().map(|&k| k * (k - 1) / 2).sum()
    }

    /// Sum of k_l; the incidence count between P and its spanned lines.
    pub fn incidence_total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn max_multiplicity(&self) -> u64 {
        self.counts.values().copied().max().unwrap_or(0)
    }

    /// Number of spanned lines carrying exactly k points, for each k.
    pub fn census(&self) -> BTreeMap<u64, usize> {
        let mut out = BTreeMap::new();
        for &k in self.counts.values() {
            *out.entry(k).or_insert(0) += 1;
        }
        out
    }
}

fn isqrt(n: u64) -> u64 {
    let mut r = (n as f64).sqrt() as u64;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// Recovers k from m = k(k - 1).
fn points_from_ordered_pairs(m: u64) -> u64 {
    let k = isqrt(1 + 4 * m).div_ceil(2);
    assert_eq!(k * (k - 1), m, "ordered pair count {m} is not of the form k(k-1)");
    k
}

/// All lines through at least two points of P with their exact point counts.
pub fn spanned_lines(points: &PointSet) -> Result<LineMultiplicityMap> {
    let n = points.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let f = *points.field();
    let pts = points.items();
    let pair_counts = (0..n)
        .into_par_iter()
        .fold(HashMap::<Line, u64>::new, |mut acc, i| {
            for j in i + 1..n {
                let l = line_through(&f, pts[i], pts[j]).expect("set elements are distinct");
                *acc.entry(l).or_insert(0) += 1;
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (l, c) in b {
                *a.entry(l).or_insert(0) += c;
            }
            a
        });
    let counts = pair_counts
        .into_iter()
        .map(|(l, unordered)| (l, points_from_ordered_pairs(2 * unordered)))
        .collect();
    Ok(LineMultiplicityMap { field: f, counts })
}

pub fn count_incidences_naive(points: &PointSet, lines: &LineSet) -> u64 {
    let f = points.field();
    points
        .iter()
        .map(|&q| lines.iter().filter(|l| on_line(f, q, l)).count() as u64)
        .sum()
}

/// Groups lines into parallel classes; each point meets each class at most once.
pub fn count_incidences_bucketed(points: &PointSet, lines: &LineSet) -> u64 {
    let f = points.field();
    let mut buckets: BTreeMap<(u64, u64), HashSet<u64>> = BTreeMap::new();
    for l in lines {
        buckets.entry(l.slope_key()).or_default().insert(l.c);
    }
    let mut total = 0;
    for q in points {
        for (&(a, b), offsets) in &buckets {
            let c = f.neg(f.add(f.mul(a, q.x), f.mul(b, q.y)));
            if offsets.contains(&c) {
                total += 1;
            }
        }
    }
    total
}

pub fn count_incidences(points: &PointSet, lines: &LineSet) -> u64 {
    count_incidences_bucketed(points, lines)
}

pub fn count_proj_incidences_naive(points: &ProjPointSet, lines: &ProjLineSet) -> u64 {
    let f = points.field();
    points
        .iter()
        .map(|q| lines.iter().filter(|l| proj_incident(f, q, l)).count() as u64)
        .sum()
}

/// Projective analogue of [`count_incidences_bucketed`]: finite points look up
/// the single offset they need per direction class, points at infinity meet a
/// whole class or none of it.
pub fn count_proj_incidences_bucketed(points: &ProjPointSet, lines: &ProjLineSet) -> u64 {
    let f = points.field();
    let mut buckets: BTreeMap<(u64, u64), HashSet<u64>> = BTreeMap::new();
    let mut has_infinity_line = false;
    for l in lines {
        if l.a == 0 && l.b == 0 {
            has_infinity_line = true;
        } else {
            buckets.entry((l.a, l.b)).or_default().insert(l.c);
        }
    }
    let mut total = 0u64;
    for q in points {
        if q.z == 0 {
            if has_infinity_line {
                total += 1;
            }
            for (&(a, b), offsets) in &buckets {
                if f.add(f.mul(a, q.x), f.mul(b, q.y)) == 0 {
                    total += offsets.len() as u64;
                }
            }
        } else {
            let zinv = f.inv(q.z).expect("z != 0");
            for (&(a, b), offsets) in &buckets {
                let c = f.mul(f.neg(f.add(f.mul(a, q.x), f.mul(b, q.y))), zinv);
                if offsets.contains(&c) {
                    total += 1;
                }
            }
        }
    }
    total
}

pub fn count_proj_incidences(points: &ProjPointSet, lines: &ProjLineSet) -> u64 {
    count_proj_incidences_bucketed(points, lines)
}

/// Spanned lines carrying at least `t` points of P.
pub fn rich_lines(points: &PointSet, t: u64) -> Result<LineSet> {
    if t < 2 {
        return Err(Error::InvalidParameter(format!("rich-line threshold {t} < 2")));
    }
    if points.len() < 2 {
        return Ok(LineSet::new(*points.field(), []));
    }
    let m = spanned_lines(points)?;
    Ok(LineSet::new(
        *points.field(),
        m.iter().filter(|(_, &k)| k >= t).map(|(l, _)| *l),
    ))
}

/// det [[1,1,1],[x1,x2,x3],[y1,y2,y3]]
#[inline]
pub fn collinearity_det(f: &PrimeField, a: AffinePoint, b: AffinePoint, c: AffinePoint) -> u64 {
    f.sub(
        f.mul(f.sub(b.x, a.x), f.sub(c.y, a.y)),
        f.mul(f.sub(c.x, a.x), f.sub(b.y, a.y)),
    )
}

/// Ordered triples of distinct points of P with vanishing determinant.
pub fn collinear_triples_det(points: &PointSet) -> u64 {
    let f = points.field();
    let pts = points.items();
    let n = pts.len();
    let mut count = 0;
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            for k in 0..n {
                if k == i || k == j {
                    continue;
                }
                if collinearity_det(f, pts[i], pts[j], pts[k]) == 0 {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Sum over spanned lines of k(k-1)(k-2).
pub fn collinear_triples_via_lines(m: &LineMultiplicityMap) -> u64 {
    m.counts.values().map(|&k| k * (k - 1) * k.saturating_sub(2)).sum()
}

/// Effective exponent of a square grid A1 x A2 against |L(P)| = n^(2 + 2 delta).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeckStatistic {
    pub n: usize,
    pub lines: usize,
    pub delta_eff: f64,
    /// |L(P)| / |P|^(1 + 1/267)
    pub ratio: f64,
    /// true when n^2 < p, i.e. |A| < sqrt(p)
    pub in_range: bool,
}

impl BeckStatistic {
    pub fn from_counts(n: usize, lines: usize, p: u64) -> Self {
        let nf = n as f64;
        let lf = lines as f64;
        let delta_eff = (lf.ln() / nf.ln() - 2.0) / 2.0;
        let ratio = lf / (nf * nf).powf(1.0 + BECK_EXPONENT_GAP);
        BeckStatistic {
            n,
            lines,
            delta_eff,
            ratio,
            in_range: (n as u64) * (n as u64) < p,
        }
    }
}

/// Splits a point set into its coordinate projections if it is a full grid.
pub fn grid_factors(points: &PointSet) -> Option<(Vec<u64>, Vec<u64>)> {
    let mut xs: Vec<u64> = points.iter().map(|q| q.x).collect();
    let mut ys: Vec<u64> = points.iter().map(|q| q.y).collect();
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    (xs.len() * ys.len() == points.len()).then_some((xs, ys))
}

pub fn beck_delta_effective(points: &PointSet) -> Result<BeckStatistic> {
    let (xs, ys) = grid_factors(points).ok_or(Error::NotCartesian)?;
    if xs.len() != ys.len() {
        return Err(Error::NotCartesian);
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 4, got: points.len() });
    }
    let lines = spanned_lines(points)?.len();
    Ok(BeckStatistic::from_counts(n, lines, points.field().modulus()))
}

/// I(P, L) / n^(3/2 - 1/10678).
pub fn incidence_ratio(incidences: u64, n: usize) -> f64 {
    incidences as f64 / (n as f64).powf(1.5 - INCIDENCE_EXPONENT_GAP)
}
