//! Balog-Szemerédi-Gowers extraction.
//!
//! Given X, Y of size n and a set E of pairs on which x + y takes at most n
//! values, [`bsg_extract`] finds X' ⊆ X, Y' ⊆ Y of size about α·n whose full
//! sumset is O(α^-5 n). It follows the graph-theoretic argument: drop
//! low-degree vertices of X, take the neighbourhood of a pivot y0, discard
//! vertices of that neighbourhood that share few common neighbours with too
//! many others (so most pairs in X' are joined by many paths of length 2),
//! and keep the y with many neighbours in X'. The random pivot of the
//! original argument is replaced by a scan over every y0, keeping the best
//! result. [`bsg_oracle`] is an exhaustive certifier for n <= 8.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::addcomb::{sumset, ElementSet};
use crate::error::{Error, Result};

/// Largest n accepted by [`bsg_oracle`].
pub const ORACLE_LIMIT: usize = 8;

/// Pairs x, x' in the pivot neighbourhood are "bad" when their common
/// neighbourhood is smaller than this fraction of α²|Y|.
const CODEGREE_FRACTION: f64 = 0.25;
/// A vertex survives the refinement when at most this fraction of the
/// pivot neighbourhood forms bad pairs with it.
const BAD_PARTNER_FRACTION: f64 = 0.25;

/// Bipartite graph of pairs (x, y) ∈ X × Y.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairGraph {
    x: ElementSet,
    y: ElementSet,
    edges: BTreeSet<(u64, u64)>,
}

impl PairGraph {
    pub fn new(x: ElementSet, y: ElementSet, edges: impl IntoIterator<Item = (u64, u64)>) -> Result<Self> {
        if x.field() != y.field() {
            return Err(Error::ModulusMismatch(x.field().modulus(), y.field().modulus()));
        }
        let edges: BTreeSet<(u64, u64)> = edges.into_iter().collect();
        if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| !x.contains(a) || !y.contains(b)) {
            return Err(Error::InvalidParameter(format!("edge ({a}, {b}) is not in X x Y")));
        }
        if edges.is_empty() {
            return Err(Error::InvalidParameter("edge set is empty".into()));
        }
        Ok(PairGraph { x, y, edges })
    }

    /// E = {(x, y) : x + y ∈ targets}.
    pub fn from_sum_targets(x: ElementSet, y: ElementSet, targets: &ElementSet) -> Result<Self> {
        let f = *x.field();
        let edges: Vec<(u64, u64)> = x
            .iter()
            .flat_map(|a| y.iter().map(move |b| (a, b)))
            .filter(|&(a, b)| targets.contains(f.add(a, b)))
            .collect();
        Self::new(x, y, edges)
    }

    /// E = pairs whose sum is among the `k` most popular sums (ties to the smaller sum).
    pub fn from_popular_sums(x: ElementSet, y: ElementSet, k: usize) -> Result<Self> {
        let rep = crate::addcomb::representation_count(&x, &y)?;
        let mut sums: Vec<(u64, u64)> = rep.iter().collect();
        sums.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let targets = ElementSet::new(*x.field(), sums.iter().take(k).map(|&(s, _)| s));
        Self::from_sum_targets(x, y, &targets)
    }

    pub fn x(&self) -> &ElementSet {
        &self.x
    }

    pub fn y(&self) -> &ElementSet {
        &self.y
    }

    pub fn edges(&self) -> &BTreeSet<(u64, u64)> {
        &self.edges
    }

    /// |E| / (|X| |Y|)
    pub fn alpha(&self) -> f64 {
        self.edges.len() as f64 / (self.x.len() * self.y.len()) as f64
    }

    pub fn distinct_sums(&self) -> usize {
        let f = self.x.field();
        self.edges
            .iter()
            .map(|&(a, b)| f.add(a, b))
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// Acceptance thresholds for an extraction: sizes >= c·α·n and
/// |X' + Y'| <= C·α^-5·n.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BsgThresholds {
    pub c_bsg: f64,
    pub big_c_bsg: f64,
}

impl Default for BsgThresholds {
    fn default() -> Self {
        BsgThresholds {
            c_bsg: 1.0 / 16.0,
            big_c_bsg: 1024.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BsgResult {
    pub x_sub: ElementSet,
    pub y_sub: ElementSet,
    /// |X' + Y'|
    pub sumset_size: usize,
    pub n: usize,
    pub alpha: f64,
    /// |X'| / (α n)
    pub x_size_ratio: f64,
    /// |Y'| / (α n)
    pub y_size_ratio: f64,
    /// |X' + Y'| / (α^-5 n)
    pub sumset_ratio: f64,
    /// Pivot y0 that produced the result; `None` for the oracle.
    pub pivot: Option<u64>,
}

impl BsgResult {
    fn build(g: &PairGraph, x_sub: ElementSet, y_sub: ElementSet, sumset_size: usize, pivot: Option<u64>) -> Self {
        let n = g.x.len();
        let alpha = g.alpha();
        let an = alpha * n as f64;
        BsgResult {
            x_size_ratio: x_sub.len() as f64 / an,
            y_size_ratio: y_sub.len() as f64 / an,
            sumset_ratio: sumset_size as f64 / (n as f64 / alpha.powi(5)),
            x_sub,
            y_sub,
            sumset_size,
            n,
            alpha,
            pivot,
        }
    }

    pub fn min_size(&self) -> usize {
        self.x_sub.len().min(self.y_sub.len())
    }

    pub fn meets(&self, t: &BsgThresholds) -> bool {
        self.x_size_ratio >= t.c_bsg && self.y_size_ratio >= t.c_bsg && self.sumset_ratio <= t.big_c_bsg
    }
}

/// Fixed-width bitset over vertex indices.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Bits(Vec<u64>);

impl Bits {
    fn new(n: usize) -> Self {
        Bits(vec![0; n.div_ceil(64)])
    }
    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }
    fn get(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }
    fn count(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }
    fn and_count(&self, other: &Bits) -> usize {
        self.0.iter().zip(&other.0).map(|(a, b)| (a & b).count_ones() as usize).sum()
    }
    fn ones(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        (0..n).filter(move |&i| self.get(i))
    }
}

fn check_square(g: &PairGraph) -> Result<usize> {
    let n = g.x.len();
    if g.y.len() != n {
        return Err(Error::InvalidParameter(format!(
            "|X| = {} and |Y| = {} differ",
            n,
            g.y.len()
        )));
    }
    if n < 2 {
        return Err(Error::SetTooSmall { needed: 2, got: n });
    }
    Ok(n)
}

pub fn bsg_extract(g: &PairGraph) -> Result<BsgResult> {
    let n = check_square(g)?;
    let distinct = g.distinct_sums();
    if distinct > n {
        return Err(Error::HypothesisViolated { distinct, limit: n });
    }
    let xs = g.x.as_slice();
    let ys = g.y.as_slice();
    let alpha = g.alpha();

    let mut x_adj = vec![Bits::new(n); n];
    let mut y_adj = vec![Bits::new(n); n];
    for &(a, b) in &g.edges {
        let i = xs.binary_search(&a).expect("edge endpoint in X");
        let j = ys.binary_search(&b).expect("edge endpoint in Y");
        x_adj[i].set(j);
        y_adj[j].set(i);
    }

    let high_degree: Vec<bool> = x_adj
        .iter()
        .map(|nb| nb.count() as f64 >= alpha * n as f64 / 2.0)
        .collect();
    let codegree_floor = CODEGREE_FRACTION * alpha * alpha * n as f64;

    // (min size, -sumset size) is maximised; earlier pivots win ties
    let mut best: Option<(usize, usize, BsgResult)> = None;
    for (j, &y0) in ys.iter().enumerate() {
        let pool: Vec<usize> = y_adj[j].ones(n).filter(|&i| high_degree[i]).collect();
        if pool.is_empty() {
            continue;
        }
        let bad: Vec<usize> = pool
            .iter()
            .map(|&i| {
                pool.iter()
                    .filter(|&&k| (x_adj[i].and_count(&x_adj[k]) as f64) < codegree_floor)
                    .count()
            })
            .collect();
        let limit = BAD_PARTNER_FRACTION * pool.len() as f64;
        let mut kept: Vec<usize> = pool
            .iter()
            .zip(&bad)
            .filter(|&(_, &b)| b as f64 <= limit)
            .map(|(&i, _)| i)
            .collect();
        if kept.is_empty() {
            let (&i, _) = pool
                .iter()
                .zip(&bad)
                .min_by_key(|&(&i, &b)| (b, i))
                .expect("pool is non-empty");
            kept.push(i);
        }
        let mut kept_bits = Bits::new(n);
        for &i in &kept {
            kept_bits.set(i);
        }
        let y_floor = alpha * kept.len() as f64 / 2.0;
        let y_keep: Vec<usize> = (0..n)
            .filter(|&k| y_adj[k].and_count(&kept_bits) as f64 >= y_floor)
            .collect();

        let x_sub = ElementSet::new(*g.x.field(), kept.iter().map(|&i| xs[i]));
        let y_sub = ElementSet::new(*g.y.field(), y_keep.iter().map(|&k| ys[k]));
        let size = sumset(&x_sub, &y_sub)?.len();
        let key = (x_sub.len().min(y_sub.len()), size);
        let better = match &best {
            None => true,
            Some((m, s, _)) => key.0 > *m || (key.0 == *m && key.1 < *s),
        };
        if better {
            best = Some((key.0, key.1, BsgResult::build(g, x_sub, y_sub, size, Some(y0))));
        }
    }
    let (_, _, result) = best.expect("some x has degree >= average, so some pivot has a non-empty pool");
    debug_assert!(result.x_sub.is_subset(&g.x) && result.y_sub.is_subset(&g.y));
    Ok(result)
}

/// (min size, total size, smallest sumset)
type Score = (usize, usize, std::cmp::Reverse<usize>);

/// Exhaustive search for the pair (X', Y') maximising min(|X'|, |Y'|) subject to
/// |X' + Y'| <= α^-5 n. Ties go to larger |X'| + |Y'|, then to the smaller sumset.
pub fn bsg_oracle(g: &PairGraph) -> Result<BsgResult> {
    let n = g.x.len().max(g.y.len());
    if n > ORACLE_LIMIT {
        return Err(Error::SearchTooLarge {
            size: n,
            limit: ORACLE_LIMIT,
        });
    }
    let n = check_square(g)?;
    let f = *g.x.field();
    let xs = g.x.as_slice();
    let ys = g.y.as_slice();
    let budget = n as f64 / g.alpha().powi(5);
    let sums: Vec<Vec<u64>> = xs.iter().map(|&a| ys.iter().map(|&b| f.add(a, b)).collect()).collect();

    // (score, x mask, y mask)
    let mut best: Option<(Score, u32, u32)> = None;
    let mut buf = Vec::with_capacity(n * n);
    for xm in 1u32..1 << n {
        for ym in 1u32..1 << n {
            let (cx, cy) = (xm.count_ones() as usize, ym.count_ones() as usize);
            let key_head = (cx.min(cy), cx + cy);
            if let Some((k, _, _)) = &best {
                if key_head < (k.0, k.1) {
                    continue;
                }
            }
            buf.clear();
            for i in (0..n).filter(|&i| xm >> i & 1 == 1) {
                for k in (0..n).filter(|&k| ym >> k & 1 == 1) {
                    buf.push(sums[i][k]);
                }
            }
            buf.sort_unstable();
            buf.dedup();
            if buf.len() as f64 > budget {
                continue;
            }
            let key = (key_head.0, key_head.1, std::cmp::Reverse(buf.len()));
            if best.as_ref().is_none_or(|(k, _, _)| key > *k) {
                best = Some((key, xm, ym));
            }
        }
    }
    let Some((key, xm, ym)) = best else {
        return Err(Error::InvalidParameter("no subset pair fits the sumset budget".into()));
    };
    let x_sub = ElementSet::new(f, (0..n).filter(|&i| xm >> i & 1 == 1).map(|i| xs[i]));
    let y_sub = ElementSet::new(f, (0..n).filter(|&k| ym >> k & 1 == 1).map(|k| ys[k]));
    Ok(BsgResult::build(g, x_sub, y_sub, key.2 .0, None))
}
