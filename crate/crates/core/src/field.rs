//! Exact arithmetic in the prime field F_p.
//!
//! The modulus is capped below 2^31 so that every product of two residues
//! fits in a `u64` without overflow. Hot loops elsewhere in the crate work on
//! raw `u64` residues through the [`PrimeField`] methods; [`FieldElement`] is
//! the checked, self-describing value type.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_MODULUS: u64 = 1 << 31;

/// Witnesses that make Miller-Rabin deterministic for n < 3,215,031,751.
const MR_WITNESSES: [u64; 4] = [2, 3, 5, 7];

fn is_prime_trial(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 1;
    }
    true
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * base % m;
        }
        base = base * base % m;
        exp >>= 1;
    }
    acc
}

fn is_prime_miller_rabin(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for &w in &MR_WITNESSES {
        if n == w {
            return true;
        }
        if n.is_multiple_of(w) {
            return false;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for &a in &MR_WITNESSES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = x * x % n;
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Deterministic primality test for n < 2^31.
pub fn is_prime(n: u64) -> bool {
    debug_assert!(n < MAX_MODULUS);
    if n < (1 << 16) {
        is_prime_trial(n)
    } else {
        is_prime_miller_rabin(n)
    }
}

/// The field F_p for an odd prime 3 <= p < 2^31.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct PrimeField {
    p: u64,
}

impl TryFrom<u64> for PrimeField {
    type Error = Error;

    fn try_from(p: u64) -> Result<Self> {
        PrimeField::new(p)
    }
}

impl From<PrimeField> for u64 {
    fn from(f: PrimeField) -> u64 {
        f.p
    }
}

impl fmt::Display for PrimeField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F_{}", self.p)
    }
}

/// Builds the field context, rejecting composites and moduli outside [3, 2^31).
pub fn make_field(p: u64) -> Result<PrimeField> {
    PrimeField::new(p)
}

impl PrimeField {
    pub fn new(p: u64) -> Result<Self> {
        if p < 3 {
            return Err(Error::TooSmall(p));
        }
        if p >= MAX_MODULUS {
            return Err(Error::TooLarge(p));
        }
        if !is_prime(p) {
            return Err(Error::NotPrime(p));
        }
        Ok(PrimeField { p })
    }

    #[inline]
    pub fn modulus(&self) -> u64 {
        self.p
    }

    /// Number of elements, as a `usize`.
    #[inline]
    pub fn order(&self) -> usize {
        self.p as usize
    }

    #[inline]
    pub fn reduce(&self, v: i64) -> u64 {
        v.rem_euclid(self.p as i64) as u64
    }

    #[inline]
    pub fn elem(&self, v: i64) -> FieldElement {
        FieldElement {
            value: self.reduce(v),
            modulus: self.p,
        }
    }

    #[inline]
    pub fn zero(&self) -> FieldElement {
        self.elem(0)
    }

    #[inline]
    pub fn one(&self) -> FieldElement {
        self.elem(1)
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        let s = a + b;
        if s >= self.p {
            s - self.p
        } else {
            s
        }
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        if a >= b {
            a - b
        } else {
            a + self.p - b
        }
    }

    #[inline]
    pub fn neg(&self, a: u64) -> u64 {
        if a == 0 {
            0
        } else {
            self.p - a
        }
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        a * b % self.p
    }

    pub fn pow(&self, a: u64, e: u64) -> u64 {
        pow_mod(a, e, self.p)
    }

    /// Multiplicative inverse by the extended Euclidean algorithm.
    pub fn inv(&self, a: u64) -> Result<u64> {
        let a = a % self.p;
        if a == 0 {
            return Err(Error::ZeroInverse);
        }
        let (mut r0, mut r1) = (self.p as i64, a as i64);
        let (mut t0, mut t1) = (0i64, 1i64);
        while r1 != 0 {
            let q = r0 / r1;
            (r0, r1) = (r1, r0 - q * r1);
            (t0, t1) = (t1, t0 - q * t1);
        }
        debug_assert_eq!(r0, 1);
        Ok(self.reduce(t0))
    }

    pub fn div(&self, a: u64, b: u64) -> Result<u64> {
        Ok(self.mul(a, self.inv(b)?))
    }

    /// Smallest generator of the multiplicative group.
    pub fn primitive_root(&self) -> u64 {
        let order = self.p - 1;
        let factors = prime_factors(order);
        (2..self.p)
            .find(|&g| factors.iter().all(|&q| self.pow(g, order / q) != 1))
            .unwrap_or(1)
    }

    /// Every residue 0..p in increasing order.
    pub fn elements(&self) -> impl Iterator<Item = u64> {
        0..self.p
    }
}

fn prime_factors(mut n: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut d = 2;
    while d * d <= n {
        if n.is_multiple_of(d) {
            out.push(d);
            while n.is_multiple_of(d) {
                n /= d;
            }
        }
        d += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

/// A residue together with the modulus it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FieldElement {
    value: u64,
    modulus: u64,
}

impl FieldElement {
    #[inline]
    pub fn value(&self) -> u64 {
        self.value
    }

    #[inline]
    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    pub fn is_zero(&self) -> bool {
        self.value == 0
    }

    pub fn field(&self) -> PrimeField {
        PrimeField { p: self.modulus }
    }

    pub fn inverse(self) -> Result<FieldElement> {
        inverse(self)
    }

    fn check(&self, other: &FieldElement) {
        assert_eq!(
            self.modulus, other.modulus,
            "cannot combine elements of F_{} and F_{}",
            self.modulus, other.modulus
        );
    }

    fn with(&self, value: u64) -> FieldElement {
        FieldElement {
            value,
            modulus: self.modulus,
        }
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value)
    }
}

impl Add for FieldElement {
    type Output = FieldElement;
    fn add(self, rhs: FieldElement) -> FieldElement {
        self.check(&rhs);
        self.with(self.field().add(self.value, rhs.value))
    }
}

impl Sub for FieldElement {
    type Output = FieldElement;
    fn sub(self, rhs: FieldElement) -> FieldElement {
        self.check(&rhs);
        self.with(self.field().sub(self.value, rhs.value))
    }
}

impl Mul for FieldElement {
    type Output = FieldElement;
    fn mul(self, rhs: FieldElement) -> FieldElement {
        self.check(&rhs);
        self.with(self.field().mul(self.value, rhs.value))
    }
}

impl Neg for FieldElement {
    type Output = FieldElement;
    fn neg(self) -> FieldElement {
        self.with(self.field().neg(self.value))
    }
}

pub fn inverse(x: FieldElement) -> Result<FieldElement> {
    Ok(x.with(x.field().inv(x.value)?))
}

/// The affine map t -> (t - y1)/(y2 - y1), sending y1 to 0 and y2 to 1.
pub fn affine_normalize(t: FieldElement, y1: FieldElement, y2: FieldElement) -> Result<FieldElement> {
    if t.modulus != y1.modulus {
        return Err(Error::ModulusMismatch(t.modulus, y1.modulus));
    }
    if t.modulus != y2.modulus {
        return Err(Error::ModulusMismatch(t.modulus, y2.modulus));
    }
    if y1 == y2 {
        return Err(Error::DegenerateMap);
    }
    Ok((t - y1) * inverse(y2 - y1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn make_field_examples() {
        assert_eq!(make_field(7).unwrap().modulus(), 7);
        assert_eq!(make_field(9), Err(Error::NotPrime(9)));
        assert_eq!(make_field(1009).unwrap().modulus(), 1009);
        assert_eq!(make_field(2), Err(Error::TooSmall(2)));
        assert_eq!(make_field(1), Err(Error::TooSmall(1)));
        assert_eq!(make_field(1 << 31), Err(Error::TooLarge(1 << 31)));
    }

    #[test]
    fn primality_agrees_with_trial_division_across_the_switch() {
        for n in (1u64 << 16) - 2000..(1 << 16) + 2000 {
            assert_eq!(is_prime_miller_rabin(n), is_prime_trial(n), "n = {n}");
        }
        // strong pseudoprimes to small bases
        for n in [2047u64, 1373653, 25326001, 3215031751 - 2] {
            if n < MAX_MODULUS {
                assert_eq!(is_prime(n), is_prime_trial(n), "n = {n}");
            }
        }
        assert!(is_prime(2147483647));
    }

    #[test]
    fn inverse_examples() {
        let f7 = make_field(7).unwrap();
        assert_eq!(inverse(f7.elem(3)).unwrap().value(), 5);
        assert_eq!(inverse(f7.elem(1)).unwrap().value(), 1);
        let f11 = make_field(11).unwrap();
        assert_eq!(inverse(f11.elem(2)).unwrap().value(), 6);
        assert_eq!(inverse(f11.elem(0)), Err(Error::ZeroInverse));
    }

    #[test]
    fn affine_normalize_examples() {
        let f = make_field(7).unwrap();
        let (y1, y2) = (f.elem(1), f.elem(3));
        assert_eq!(affine_normalize(y1, y1, y2).unwrap().value(), 0);
        assert_eq!(affine_normalize(y2, y1, y2).unwrap().value(), 1);
        assert_eq!(affine_normalize(f.elem(5), y1, y2).unwrap().value(), 2);
        assert_eq!(affine_normalize(f.elem(5), y1, y1), Err(Error::DegenerateMap));
    }

    #[test]
    fn affine_normalize_is_a_bijection() {
        for p in [3u64, 5, 7, 11, 13, 17, 19, 23, 29, 31] {
            let f = make_field(p).unwrap();
            for a in 0..p {
                for b in 0..p {
                    if a == b {
                        continue;
                    }
                    let mut seen = vec![false; p as usize];
                    for t in 0..p {
                        let v = affine_normalize(f.elem(t as i64), f.elem(a as i64), f.elem(b as i64))
                            .unwrap()
                            .value();
                        assert!(!seen[v as usize]);
                        seen[v as usize] = true;
                    }
                }
            }
        }
    }

    #[test]
    fn primitive_root_generates() {
        for p in [3u64, 7, 11, 101, 1009] {
            let f = make_field(p).unwrap();
            let g = f.primitive_root();
            let mut x = 1;
            for k in 1..p - 1 {
                x = f.mul(x, g);
                assert_ne!(x, 1, "order of {g} mod {p} is {k}");
            }
        }
    }

    #[test]
    #[should_panic(expected = "cannot combine")]
    fn mixing_moduli_panics() {
        let a = make_field(7).unwrap().elem(1);
        let b = make_field(11).unwrap().elem(1);
        let _ = a + b;
    }

    fn big_prime() -> impl Strategy<Value = u64> {
        prop_oneof![Just(3u64), Just(101), Just(65537), Just(1_000_003), Just(2147483647)]
    }

    proptest! {
        #[test]
        fn inverse_round_trips(p in big_prime(), x in 1u64..u64::MAX) {
            let f = PrimeField::new(p).unwrap();
            let x = x % p;
            prop_assume!(x != 0);
            let y = f.inv(x).unwrap();
            prop_assert_eq!(f.mul(x, y), 1);
            prop_assert_eq!(f.inv(y).unwrap(), x);
        }

        #[test]
        fn arithmetic_stays_reduced(p in big_prime(), a in any::<u64>(), b in any::<u64>()) {
            let f = PrimeField::new(p).unwrap();
            let (a, b) = (a % p, b % p);
            for v in [f.add(a, b), f.sub(a, b), f.mul(a, b), f.neg(a)] {
                prop_assert!(v < p);
            }
            prop_assert_eq!(f.add(f.sub(a, b), b), a);
            prop_assert_eq!(f.mul(a, b) as u128, (a as u128 * b as u128) % p as u128);
        }
    }
}
