//! Sumsets, product sets, energies, ratio sets, and checkers for the
//! Plünnecke-Ruzsa, Ruzsa triangle and covering inequalities.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::PrimeField;

/// Below this modulus representation counts use a dense array.
const DENSE_LIMIT: u64 = 1 << 20;

/// Limit for the exhaustive witness search over subsets of the dummy set.
pub const WITNESS_SEARCH_LIMIT: usize = 12;

/// A deduplicated, sorted set of residues mod p.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ElementSet {
    field: PrimeField,
    elems: Vec<u64>,
}

impl ElementSet {
    /// Builds a set from residues already in [0, p) or arbitrary integers, reducing mod p.
    pub fn new(field: PrimeField, elems: impl IntoIterator<Item = u64>) -> Self {
        let p = field.modulus();
        let mut elems: Vec<u64> = elems.into_iter().map(|e| e % p).collect();
        elems.sort_unstable();
        elems.dedup();
        ElementSet { field, elems }
    }

    pub fn from_signed(field: PrimeField, elems: impl IntoIterator<Item = i64>) -> Self {
        Self::new(field, elems.into_iter().map(|e| field.reduce(e)))
    }

    pub fn empty(field: PrimeField) -> Self {
        ElementSet { field, elems: Vec::new() }
    }

    /// {start, start+1, ..., start+n-1}
    pub fn interval(field: PrimeField, start: u64, n: usize) -> Self {
        Self::new(field, (0..n as u64).map(|i| start + i))
    }

    pub fn field(&self) -> &PrimeField {
        &self.field
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.elems
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        self.elems.iter().copied()
    }

    pub fn contains(&self, x: u64) -> bool {
        self.elems.binary_search(&x).is_ok()
    }

    pub fn is_subset(&self, other: &ElementSet) -> bool {
        self.elems.iter().all(|&x| other.contains(x))
    }

    pub fn intersection(&self, other: &ElementSet) -> ElementSet {
        self.filter(|x| other.contains(x))
    }

    pub fn union(&self, other: &ElementSet) -> ElementSet {
        ElementSet::new(self.field, self.iter().chain(other.iter()))
    }

    pub fn filter(&self, mut keep: impl FnMut(u64) -> bool) -> ElementSet {
        ElementSet {
            field: self.field,
            elems: self.elems.iter().copied().filter(|&x| keep(x)).collect(),
        }
    }

    /// The first `k` elements in sorted order.
    pub fn take(&self, k: usize) -> ElementSet {
        ElementSet {
            field: self.field,
            elems: self.elems.iter().copied().take(k).collect(),
        }
    }

    fn map(&self, f: impl Fn(u64) -> u64) -> ElementSet {
        ElementSet::new(self.field, self.elems.iter().map(|&x| f(x)))
    }

    pub fn check_field(&self, other: &ElementSet) -> Result<()> {
        if self.field != other.field {
            return Err(Error::ModulusMismatch(self.field.modulus(), other.field.modulus()));
        }
        Ok(())
    }
}

impl fmt::Display for ElementSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, x) in self.elems.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x}")?;
        }
        write!(f, "}}")
    }
}

fn combine(a: &ElementSet, b: &ElementSet, op: impl Fn(u64, u64) -> u64) -> Result<ElementSet> {
    a.check_field(b)?;
    let f = a.field;
    if f.modulus() <= DENSE_LIMIT {
        let mut hit = vec![false; f.order()];
        for x in a.iter() {
            for y in b.iter() {
                hit[op(x, y) as usize] = true;
            }
        }
        let elems = hit
            .iter()
            .enumerate()
            .filter_map(|(i, &h)| h.then_some(i as u64))
            .collect();
        Ok(ElementSet { field: f, elems })
    } else {
        Ok(ElementSet::new(
            f,
            a.iter().flat_map(|x| b.iter().map(move |y| (x, y))).map(|(x, y)| op(x, y)),
        ))
    }
}

/// A + B
pub fn sumset(a: &ElementSet, b: &ElementSet) -> Result<ElementSet> {
    let f = a.field;
    combine(a, b, |x, y| f.add(x, y))
}

/// A - B
pub fn difference_set(a: &ElementSet, b: &ElementSet) -> Result<ElementSet> {
    let f = a.field;
    combine(a, b, |x, y| f.sub(x, y))
}

/// A * B
pub fn product_set(a: &ElementSet, b: &ElementSet) -> Result<ElementSet> {
    let f = a.field;
    combine(a, b, |x, y| f.mul(x, y))
}

/// X1 + X2 + ... + Xk for a non-empty list of summands.
pub fn iterated_sumset(sets: &[&ElementSet]) -> Result<ElementSet> {
    let Some((first, rest)) = sets.split_first() else {
        return Err(Error::InvalidParameter("empty list of summands".into()));
    };
    rest.iter().try_fold((*first).clone(), |acc, s| sumset(&acc, s))
}

/// b * A
pub fn dilate(b: u64, a: &ElementSet) -> Result<ElementSet> {
    let f = a.field;
    let b = b % f.modulus();
    if b == 0 {
        return Err(Error::ZeroDilate);
    }
    Ok(a.map(|x| f.mul(b, x)))
}

/// t + A
pub fn translate(t: u64, a: &ElementSet) -> ElementSet {
    let f = a.field;
    let t = t % f.modulus();
    a.map(|x| f.add(t, x))
}

/// -A
pub fn negate(a: &ElementSet) -> ElementSet {
    let f = a.field;
    a.map(|x| f.neg(x))
}

/// {1/a : a in A}
pub fn invert_elements(a: &ElementSet) -> Result<ElementSet> {
    if a.contains(0) {
        return Err(Error::ZeroElement);
    }
    let f = a.field;
    Ok(a.map(|x| f.inv(x).expect("nonzero")))
}

/// Multiplicities r(s) = #{(a, b) in A x B : a + b = s}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Representation {
    counts: BTreeMap<u64, u64>,
}

impl Representation {
    pub fn get(&self, s: u64) -> u64 {
        self.counts.get(&s).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.counts.iter().map(|(&s, &r)| (s, r))
    }

    pub fn support_size(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn energy(&self) -> u64 {
        self.counts.values().map(|&r| r * r).sum()
    }
}

/// r(s) for the weighted sum a + scale*b.
pub fn representation_count_scaled(a: &ElementSet, scale: u64, b: &ElementSet) -> Result<Representation> {
    a.check_field(b)?;
    let f = a.field;
    let scale = scale % f.modulus();
    let counts = if f.modulus() <= DENSE_LIMIT {
        let mut dense = vec![0u64; f.order()];
        for x in a.iter() {
            for y in b.iter() {
                dense[f.add(x, f.mul(scale, y)) as usize] += 1;
            }
        }
        dense
            .into_iter()
            .enumerate()
            .filter(|&(_, r)| r > 0)
            .map(|(s, r)| (s as u64, r))
            .collect()
    } else {
        let mut sparse: HashMap<u64, u64> = HashMap::new();
        for x in a.iter() {
            for y in b.iter() {
                *sparse.entry(f.add(x, f.mul(scale, y))).or_insert(0) += 1;
            }
        }
        sparse.into_iter().collect()
    };
    Ok(Representation { counts })
}

pub fn representation_count(a: &ElementSet, b: &ElementSet) -> Result<Representation> {
    representation_count_scaled(a, 1, b)
}

/// #{(a1, a2, a3, a4) in A^4 : a1 + a2 = a3 + a4}
pub fn additive_energy(a: &ElementSet) -> u64 {
    representation_count(a, a).expect("same field").energy()
}

/// {(a - b)/(c - d) : a, b, c, d in Y, c != d}
pub fn ratio_set(y: &ElementSet) -> Result<ElementSet> {
    if y.len() < 2 {
        return Err(Error::SetTooSmall { needed: 2, got: y.len() });
    }
    let diffs = difference_set(y, y)?;
    let nonzero = diffs.filter(|d| d != 0);
    let inverses = invert_elements(&nonzero)?;
    product_set(&diffs, &inverses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumProductStats {
    pub size: usize,
    pub sumset: usize,
    pub product_set: usize,
    pub max: usize,
    /// log_|A| max(|A+A|, |A.A|)
    pub exponent: f64,
}

pub fn sum_product_stats(a: &ElementSet) -> Result<SumProductStats> {
    if a.len() < 2 {
        return Err(Error::SetTooSmall { needed: 2, got: a.len() });
    }
    let s = sumset(a, a)?.len();
    let m = product_set(a, a)?.len();
    let max = s.max(m);
    Ok(SumProductStats {
        size: a.len(),
        sumset: s,
        product_set: m,
        max,
        exponent: (max as f64).ln() / (a.len() as f64).ln(),
    })
}

/// |X1 + ... + Xk| against prod |Y + Xi| / |Y|^(k-1), compared exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlunneckeCheck {
    pub lhs: usize,
    pub rhs_numerator: u128,
    pub rhs_denominator: u128,
    pub rhs: f64,
    pub holds: bool,
}

fn plunnecke_rhs(y: &ElementSet, xs: &[&ElementSet]) -> Result<(u128, u128)> {
    let mut num: u128 = 1;
    for x in xs {
        num *= sumset(y, x)?.len() as u128;
    }
    let den = (y.len() as u128).pow(xs.len() as u32 - 1);
    Ok((num, den))
}

pub fn plunnecke_check(y: &ElementSet, xs: &[&ElementSet]) -> Result<PlunneckeCheck> {
    if y.is_empty() {
        return Err(Error::SetTooSmall { needed: 1, got: 0 });
    }
    if xs.is_empty() {
        return Err(Error::InvalidParameter("need at least one summand".into()));
    }
    let lhs = iterated_sumset(xs)?.len();
    let (num, den) = plunnecke_rhs(y, xs)?;
    Ok(PlunneckeCheck {
        lhs,
        rhs_numerator: num,
        rhs_denominator: den,
        rhs: num as f64 / den as f64,
        holds: lhs as u128 * den <= num,
    })
}

/// A subset Y' of the dummy set certifying the single-subset form of Plünnecke-Ruzsa.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlunneckeWitness {
    pub subset: ElementSet,
    /// |Y' + X1 + ... + Xk|
    pub lhs: usize,
    pub rhs_numerator: u128,
    pub rhs_denominator: u128,
    /// (prod |Y + Xi| / |Y|^(k-1)) * |Y'|
    pub rhs: f64,
    pub holds: bool,
}

/// Exhaustive scan for the non-empty Y' minimising |Y' + X1 + ... + Xk| / |Y'|.
///
/// Ties go to the largest subset, then to the lexicographically smallest one.
pub fn plunnecke_witness_search(y: &ElementSet, xs: &[&ElementSet]) -> Result<PlunneckeWitness> {
    if y.len() > WITNESS_SEARCH_LIMIT {
        return Err(Error::SearchTooLarge {
            size: y.len(),
            limit: WITNESS_SEARCH_LIMIT,
        });
    }
    if y.is_empty() {
        return Err(Error::SetTooSmall { needed: 1, got: 0 });
    }
    if xs.is_empty() {
        return Err(Error::InvalidParameter("need at least one summand".into()));
    }
    let total = iterated_sumset(xs)?;
    let elems = y.as_slice();
    let m = elems.len();
    // (sumset size, subset size, mask)
    let mut best: Option<(usize, usize, u32)> = None;
    let mut masks: Vec<u32> = (1..1u32 << m).collect();
    // lexicographic order on the sorted element lists
    masks.sort_by_key(|&mask| (0..m).filter(|&i| mask >> i & 1 == 1).map(|i| elems[i]).collect::<Vec<_>>());
    for mask in masks {
        let sub = ElementSet::new(y.field, (0..m).filter(|&i| mask >> i & 1 == 1).map(|i| elems[i]));
        let s = sumset(&sub, &total)?.len();
        let k = sub.len();
        let better = match best {
            None => true,
            // s/k < bs/bk, or equal ratio with larger k
            Some((bs, bk, _)) => s * bk < bs * k || (s * bk == bs * k && k > bk),
        };
        if better {
            best = Some((s, k, mask));
        }
    }
    let (lhs, _, mask) = best.expect("Y is non-empty");
    let subset = ElementSet::new(y.field, (0..m).filter(|&i| mask >> i & 1 == 1).map(|i| elems[i]));
    let (num, den) = plunnecke_rhs(y, xs)?;
    let num = num * subset.len() as u128;
    Ok(PlunneckeWitness {
        lhs,
        rhs_numerator: num,
        rhs_denominator: den,
        rhs: num as f64 / den as f64,
        holds: lhs as u128 * den <= num,
        subset,
    })
}

/// |X1 - X2| |X3| <= |X1 - X3| |X3 - X2|
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuzsaCheck {
    pub diff_12: usize,
    pub diff_13: usize,
    pub diff_32: usize,
    pub size_3: usize,
    pub holds: bool,
}

pub fn ruzsa_triangle_check(x1: &ElementSet, x2: &ElementSet, x3: &ElementSet) -> Result<RuzsaCheck> {
    if x3.is_empty() {
        return Err(Error::SetTooSmall { needed: 1, got: 0 });
    }
    let d12 = difference_set(x1, x2)?.len();
    let d13 = difference_set(x1, x3)?.len();
    let d32 = difference_set(x3, x2)?.len();
    Ok(RuzsaCheck {
        diff_12: d12,
        diff_13: d13,
        diff_32: d32,
        size_3: x3.len(),
        holds: d12 * x3.len() <= d13 * d32,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoveringResult {
    /// Offsets t, in selection order, of the translates t + X2.
    pub offsets: Vec<u64>,
    /// For each element of X1 (sorted), the index of the first translate covering it.
    pub cover_index: Vec<Option<usize>>,
    pub covered: usize,
    pub covered_fraction: f64,
    /// #translates * |X2| / min(|X1 + X2|, |X1 - X2|)
    pub bound_ratio: f64,
}

/// Greedy max-coverage by translates of X2 until a (1 - eps) fraction of X1 is covered.
///
/// Candidate offsets are X1 - X2; ties go to the smallest offset.
pub fn covering_translates(x1: &ElementSet, x2: &ElementSet, eps: f64) -> Result<CoveringResult> {
    x1.check_field(x2)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter(format!("covering fraction eps = {eps} outside (0, 1)")));
    }
    if x2.is_empty() {
        return Err(Error::SetTooSmall { needed: 1, got: 0 });
    }
    let f = x1.field;
    let targets = x1.as_slice();
    let candidates = difference_set(x1, x2)?;
    // offset -> indices of X1 it covers
    let reach: Vec<(u64, Vec<usize>)> = candidates
        .iter()
        .map(|t| {
            let hits = targets
                .iter()
                .enumerate()
                .filter(|&(_, &x)| x2.contains(f.sub(x, t)))
                .map(|(i, _)| i)
                .collect();
            (t, hits)
        })
        .collect();

    let mut cover_index: Vec<Option<usize>> = vec![None; targets.len()];
    let mut offsets = Vec::new();
    let mut covered = 0usize;
    let fraction = |c: usize| if targets.is_empty() { 1.0 } else { c as f64 / targets.len() as f64 };
    while fraction(covered) < 1.0 - eps {
        let (t, gain) = reach
            .iter()
            .map(|(t, hits)| (*t, hits.iter().filter(|&&i| cover_index[i].is_none()).count()))
            .fold((0, 0), |best, cur| if cur.1 > best.1 { cur } else { best });
        debug_assert!(gain > 0, "every uncovered element has a covering offset");
        let idx = offsets.len();
        let (_, hits) = reach.iter().find(|(o, _)| *o == t).expect("offset comes from reach");
        for &i in hits {
            if cover_index[i].is_none() {
                cover_index[i] = Some(idx);
                covered += 1;
            }
        }
        offsets.push(t);
    }

    let denom = if x1.is_empty() {
        0
    } else {
        sumset(x1, x2)?.len().min(candidates.len())
    };
    let bound_ratio = if denom == 0 {
        0.0
    } else {
        (offsets.len() * x2.len()) as f64 / denom as f64
    };
    Ok(CoveringResult {
        covered_fraction: fraction(covered),
        offsets,
        cover_index,
        covered,
        bound_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::make_field;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(p: u64, xs: &[u64]) -> ElementSet {
        ElementSet::new(make_field(p).unwrap(), xs.iter().copied())
    }

    fn random_set(rng: &mut ChaCha8Rng, p: u64, min: usize, max: usize) -> ElementSet {
        let n = rng.gen_range(min..=max);
        ElementSet::new(make_field(p).unwrap(), (0..n).map(|_| rng.gen_range(0..p)))
    }

    #[test]
    fn set_operation_examples() {
        assert_eq!(sumset(&set(7, &[1, 2]), &set(7, &[1, 2])).unwrap(), set(7, &[2, 3, 4]));
        let sq = set(7, &[1, 2, 4]);
        assert_eq!(product_set(&sq, &sq).unwrap(), sq);
        assert_eq!(dilate(3, &set(7, &[0, 1, 2])).unwrap(), set(7, &[0, 3, 6]));
        assert_eq!(dilate(7, &set(7, &[1])), Err(Error::ZeroDilate));
        assert_eq!(translate(5, &set(7, &[1, 2])), set(7, &[6, 0]));
        assert_eq!(negate(&set(7, &[0, 1])), set(7, &[0, 6]));
        assert_eq!(invert_elements(&set(7, &[3, 2])).unwrap(), set(7, &[5, 4]));
        assert_eq!(invert_elements(&set(7, &[0, 2])), Err(Error::ZeroElement));
        assert_eq!(difference_set(&set(7, &[0, 1]), &set(7, &[0, 1])).unwrap(), set(7, &[0, 1, 6]));
        assert!(sumset(&set(7, &[1]), &set(11, &[1])).is_err());
    }

    #[test]
    fn energy_examples() {
        let a = set(31, &[0, 1, 2]);
        let r = representation_count(&a, &a).unwrap();
        let expected = [(0, 1), (1, 2), (2, 3), (3, 2), (4, 1)];
        assert_eq!(r.iter().collect::<Vec<_>>(), expected);
        assert_eq!(additive_energy(&a), 19);
        // brute force over the 81 quadruples
        let xs = a.as_slice();
        let mut brute = 0;
        for &w in xs {
            for &x in xs {
                for &y in xs {
                    for &z in xs {
                        brute += (w + x == y + z) as u64;
                    }
                }
            }
        }
        assert_eq!(brute, 19);
        assert_eq!(additive_energy(&set(31, &[9])), 1);
    }

    #[test]
    fn energy_matches_quadruple_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = random_set(&mut rng, 37, 1, 8);
            let f = a.field();
            let xs = a.as_slice();
            let mut brute = 0u64;
            for &w in xs {
                for &x in xs {
                    for &y in xs {
                        for &z in xs {
                            brute += (f.add(w, x) == f.add(y, z)) as u64;
                        }
                    }
                }
            }
            assert_eq!(additive_energy(&a), brute);
            let b = random_set(&mut rng, 37, 1, 8);
            assert_eq!(representation_count(&a, &b).unwrap().total(), (a.len() * b.len()) as u64);
        }
    }

    #[test]
    fn ratio_set_examples() {
        assert_eq!(ratio_set(&set(101, &[0, 1])).unwrap(), set(101, &[0, 1, 100]));
        assert_eq!(ratio_set(&set(7, &[0, 1, 2])).unwrap().len(), 7);
        assert_eq!(ratio_set(&set(7, &[3])), Err(Error::SetTooSmall { needed: 2, got: 1 }));
    }

    #[test]
    fn ratio_set_symmetries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let y = random_set(&mut rng, 97, 2, 6);
            if y.len() < 2 {
                continue;
            }
            let r = ratio_set(&y).unwrap();
            let f = y.field();
            assert!(r.len() <= y.len().pow(4));
            for x in r.iter() {
                assert!(r.contains(f.neg(x)));
                if x != 0 {
                    assert!(r.contains(f.inv(x).unwrap()));
                }
            }
        }
    }

    #[test]
    fn sum_product_examples() {
        let s = sum_product_stats(&set(7, &[1, 2, 4])).unwrap();
        assert_eq!((s.sumset, s.product_set, s.max), (6, 3, 6));
        let ap = ElementSet::interval(make_field(101).unwrap(), 0, 8);
        let s = sum_product_stats(&ap).unwrap();
        assert_eq!(s.sumset, 15);
        let mut products: Vec<u64> = (0..8).flat_map(|a| (0..8).map(move |b| a * b)).collect();
        products.sort();
        products.dedup();
        assert_eq!(s.product_set, products.len());
        assert!(sum_product_stats(&set(7, &[1])).is_err());
    }

    #[test]
    fn plunnecke_examples() {
        let zero = set(101, &[0]);
        let x1 = set(101, &[1, 5, 9]);
        let x2 = set(101, &[2, 3]);
        let c = plunnecke_check(&zero, &[&x1, &x2]).unwrap();
        assert!(c.holds);
        assert_eq!(c.rhs_numerator, 6);

        let ap = ElementSet::interval(make_field(101).unwrap(), 0, 5);
        let c = plunnecke_check(&ap, &[&ap, &ap]).unwrap();
        assert_eq!(c.lhs, 9);
        assert!((c.rhs - 16.2).abs() < 1e-12);
        assert!(c.holds);
    }

    #[test]
    fn witness_examples() {
        let ap = ElementSet::interval(make_field(101).unwrap(), 0, 5);
        let w = plunnecke_witness_search(&ap, &[&ap, &ap]).unwrap();
        assert!(w.holds);
        let big = ElementSet::interval(make_field(101).unwrap(), 0, 13);
        assert_eq!(
            plunnecke_witness_search(&big, &[&ap]),
            Err(Error::SearchTooLarge { size: 13, limit: 12 })
        );
        // a set whose whole self achieves the minimum ratio: Y = {0} gives ratio |X| for every subset
        let single = set(101, &[0]);
        let w = plunnecke_witness_search(&single, &[&ap]).unwrap();
        assert_eq!(w.subset, single);
        // for k = 1 every subset Y' has |Y' + X| / |Y'| >= ... ; a subgroup-like coset keeps Y whole
        let f7 = make_field(7).unwrap();
        let full = ElementSet::new(f7, 0..7);
        let w = plunnecke_witness_search(&full, &[&set(7, &[1, 3])]).unwrap();
        assert_eq!(w.subset, full);
    }

    #[test]
    fn witness_search_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let y = random_set(&mut rng, 31, 1, 8);
            let k = rng.gen_range(1..=2);
            let xs: Vec<ElementSet> = (0..k).map(|_| random_set(&mut rng, 31, 1, 6)).collect();
            let refs: Vec<&ElementSet> = xs.iter().collect();
            let w = plunnecke_witness_search(&y, &refs).unwrap();
            assert!(w.holds);
            assert!(!w.subset.is_empty() && w.subset.is_subset(&y));
        }
    }

    #[test]
    fn ruzsa_examples() {
        let x = set(31, &[1, 4, 9]);
        let c = ruzsa_triangle_check(&x, &x, &x).unwrap();
        assert!(c.holds);
        let c = ruzsa_triangle_check(&set(31, &[1, 2]), &set(31, &[5, 7, 8]), &set(31, &[0])).unwrap();
        assert!(c.holds);
        assert_eq!(c.diff_12, 5);
        assert!(ruzsa_triangle_check(&x, &x, &ElementSet::empty(*x.field())).is_err());
    }

    #[test]
    fn covering_examples() {
        let x = set(101, &[0, 1, 2]);
        let c = covering_translates(&x, &x, 0.5).unwrap();
        assert_eq!(c.offsets, vec![0]);

        let f = make_field(101).unwrap();
        let x1 = ElementSet::interval(f, 0, 10);
        let x2 = ElementSet::interval(f, 0, 5);
        let c = covering_translates(&x1, &x2, 0.01).unwrap();
        assert_eq!(c.offsets, vec![0, 5]);
        assert_eq!(c.covered, 10);
        // 2 * 5 / min(|X1+X2| = 14, |X1-X2| = 14)
        assert!((c.bound_ratio - 10.0 / 14.0).abs() < 1e-12);

        assert!(covering_translates(&x1, &x2, 0.0).is_err());
        assert!(covering_translates(&x1, &ElementSet::empty(f), 0.1).is_err());
        let c = covering_translates(&ElementSet::empty(f), &x2, 0.1).unwrap();
        assert!(c.offsets.is_empty());
    }

    proptest! {
        #[test]
        fn dilates_and_translates_are_bijective(xs in prop::collection::vec(0u64..53, 0..20), b in 1u64..53, t in 0u64..53) {
            let a = set(53, &xs);
            prop_assert_eq!(dilate(b, &a).unwrap().len(), a.len());
            prop_assert_eq!(translate(t, &a).len(), a.len());
        }

        #[test]
        fn sumset_laws(xs in prop::collection::vec(0u64..53, 1..12), ys in prop::collection::vec(0u64..53, 1..12)) {
            let (a, b) = (set(53, &xs), set(53, &ys));
            prop_assert_eq!(sumset(&a, &b).unwrap(), sumset(&b, &a).unwrap());
            prop_assert_eq!(sumset(&a, &set(53, &[0])).unwrap(), a);
        }

        #[test]
        fn plunnecke_and_ruzsa_hold(
            ys in prop::collection::vec(0u64..41, 1..7),
            x1 in prop::collection::vec(0u64..41, 1..7),
            x2 in prop::collection::vec(0u64..41, 1..7),
        ) {
            let (y, a, b) = (set(41, &ys), set(41, &x1), set(41, &x2));
            prop_assert!(plunnecke_check(&y, &[&a, &b]).unwrap().holds);
            prop_assert!(ruzsa_triangle_check(&a, &b, &y).unwrap().holds);
        }

        #[test]
        fn covering_reaches_target(
            xs in prop::collection::vec(0u64..61, 0..15),
            ys in prop::collection::vec(0u64..61, 1..6),
            eps in prop_oneof![Just(0.01f64), Just(0.1), Just(0.5)],
        ) {
            let (x1, x2) = (set(61, &xs), set(61, &ys));
            let c = covering_translates(&x1, &x2, eps).unwrap();
            prop_assert!(c.covered_fraction >= 1.0 - eps);
            prop_assert!(c.offsets.len() <= x1.len());
            let mut sorted = c.offsets.clone();
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), c.offsets.len());
        }
    }
}
