//! Points, lines and projective maps in the affine plane F_p^2 and the
//! projective plane P^2(F_p).
//!
//! Coordinates are stored as raw residues; every function takes the
//! [`PrimeField`] they belong to. Lines and projective triples are kept in
//! canonical form (leftmost nonzero coordinate equal to 1), so equality and
//! hashing on the stored struct coincide with geometric equality.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::PrimeField;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AffinePoint {
    pub x: u64,
    pub y: u64,
}

impl AffinePoint {
    pub fn new(f: &PrimeField, x: i64, y: i64) -> Self {
        AffinePoint {
            x: f.reduce(x),
            y: f.reduce(y),
        }
    }
}

impl fmt::Display for AffinePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Scales `v` so that its leftmost nonzero entry is 1.
fn canonical_triple(f: &PrimeField, v: [u64; 3]) -> Result<[u64; 3]> {
    let lead = v.iter().copied().find(|&c| c != 0).ok_or(Error::ZeroVector)?;
    let s = f.inv(lead)?;
    Ok([f.mul(v[0], s), f.mul(v[1], s), f.mul(v[2], s)])
}

/// Affine line a*x + b*y + c = 0 with a = 1, or a = 0 and b = 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Line {
    pub a: u64,
    pub b: u64,
    pub c: u64,
}

impl Line {
    pub fn new(f: &PrimeField, a: i64, b: i64, c: i64) -> Result<Self> {
        let (a, b, c) = (f.reduce(a), f.reduce(b), f.reduce(c));
        if a == 0 && b == 0 {
            return Err(Error::ZeroVector);
        }
        let [a, b, c] = canonical_triple(f, [a, b, c])?;
        Ok(Line { a, b, c })
    }

    /// Canonical direction class; parallel lines share it.
    pub fn slope_key(&self) -> (u64, u64) {
        (self.a, self.b)
    }

    pub fn to_proj(&self) -> ProjLine {
        ProjLine {
            a: self.a,
            b: self.b,
            c: self.c,
        }
    }
}

impl fmt::Display for Line {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x + {}y + {} = 0", self.a, self.b, self.c)
    }
}

/// The canonical line through two distinct affine points. Symmetric in its arguments.
pub fn line_through(f: &PrimeField, p1: AffinePoint, p2: AffinePoint) -> Result<Line> {
    if p1 == p2 {
        return Err(Error::CoincidentPoints);
    }
    let dx = f.sub(p2.x, p1.x);
    let dy = f.sub(p2.y, p1.y);
    // dy*(x - x1) - dx*(y - y1) = 0
    let a = dy;
    let b = f.neg(dx);
    let c = f.sub(f.mul(dx, p1.y), f.mul(dy, p1.x));
    let [a, b, c] = canonical_triple(f, [a, b, c])?;
    Ok(Line { a, b, c })
}

pub fn on_line(f: &PrimeField, pt: AffinePoint, l: &Line) -> bool {
    f.add(f.add(f.mul(l.a, pt.x), f.mul(l.b, pt.y)), l.c) == 0
}

/// Homogeneous point [X:Y:Z], canonical.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProjPoint {
    pub x: u64,
    pub y: u64,
    pub z: u64,
}

/// Homogeneous line [a:b:c], canonical; incident to [X:Y:Z] iff aX + bY + cZ = 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProjLine {
    pub a: u64,
    pub b: u64,
    pub c: u64,
}

impl ProjPoint {
    pub fn new(f: &PrimeField, x: i64, y: i64, z: i64) -> Result<Self> {
        Self::from_triple(f, [f.reduce(x), f.reduce(y), f.reduce(z)])
    }

    pub fn from_triple(f: &PrimeField, v: [u64; 3]) -> Result<Self> {
        let [x, y, z] = canonical_triple(f, v)?;
        Ok(ProjPoint { x, y, z })
    }

    /// Canonical form of the embedding [x:y:1] of an affine point.
    pub fn embed(f: &PrimeField, pt: AffinePoint) -> Self {
        Self::from_triple(f, [pt.x, pt.y, 1]).expect("z = 1 is nonzero")
    }

    pub fn triple(&self) -> [u64; 3] {
        [self.x, self.y, self.z]
    }

    /// Affine chart z = 1; `None` on the line at infinity.
    pub fn to_affine(&self, f: &PrimeField) -> Option<AffinePoint> {
        if self.z == 0 {
            return None;
        }
        let s = f.inv(self.z).ok()?;
        Some(AffinePoint {
            x: f.mul(self.x, s),
            y: f.mul(self.y, s),
        })
    }
}

impl ProjLine {
    pub fn new(f: &PrimeField, a: i64, b: i64, c: i64) -> Result<Self> {
        Self::from_triple(f, [f.reduce(a), f.reduce(b), f.reduce(c)])
    }

    pub fn from_triple(f: &PrimeField, v: [u64; 3]) -> Result<Self> {
        let [a, b, c] = canonical_triple(f, v)?;
        Ok(ProjLine { a, b, c })
    }

    pub fn triple(&self) -> [u64; 3] {
        [self.a, self.b, self.c]
    }

    pub fn at_infinity() -> Self {
        ProjLine { a: 0, b: 0, c: 1 }
    }

    /// The affine trace of this line, `None` for the line at infinity.
    pub fn to_affine(&self) -> Option<Line> {
        if self.a == 0 && self.b == 0 {
            None
        } else {
            Some(Line {
                a: self.a,
                b: self.b,
                c: self.c,
            })
        }
    }
}

impl fmt::Display for ProjPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}:{}:{}]", self.x, self.y, self.z)
    }
}

impl fmt::Display for ProjLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}:{}:{}>", self.a, self.b, self.c)
    }
}

fn dot(f: &PrimeField, u: [u64; 3], v: [u64; 3]) -> u64 {
    f.add(f.add(f.mul(u[0], v[0]), f.mul(u[1], v[1])), f.mul(u[2], v[2]))
}

fn cross(f: &PrimeField, u: [u64; 3], v: [u64; 3]) -> [u64; 3] {
    [
        f.sub(f.mul(u[1], v[2]), f.mul(u[2], v[1])),
        f.sub(f.mul(u[2], v[0]), f.mul(u[0], v[2])),
        f.sub(f.mul(u[0], v[1]), f.mul(u[1], v[0])),
    ]
}

pub fn proj_incident(f: &PrimeField, pt: &ProjPoint, l: &ProjLine) -> bool {
    dot(f, pt.triple(), l.triple()) == 0
}

pub fn proj_line_through(f: &PrimeField, p1: &ProjPoint, p2: &ProjPoint) -> Result<ProjLine> {
    if p1 == p2 {
        return Err(Error::CoincidentPoints);
    }
    ProjLine::from_triple(f, cross(f, p1.triple(), p2.triple()))
}

/// Intersection point of two distinct projective lines.
pub fn proj_meet(f: &PrimeField, l1: &ProjLine, l2: &ProjLine) -> Result<ProjPoint> {
    if l1 == l2 {
        return Err(Error::CoincidentPoints);
    }
    ProjPoint::from_triple(f, cross(f, l1.triple(), l2.triple()))
}

/// Canonical triples in increasing lexicographic order:
/// [0:0:1], [0:1:z] for z in F_p, then [1:y:z].
fn canonical_triples(f: PrimeField) -> impl Iterator<Item = [u64; 3]> {
    let p = f.modulus();
    std::iter::once([0, 0, 1])
        .chain((0..p).map(|z| [0, 1, z]))
        .chain((0..p).flat_map(move |y| (0..p).map(move |z| [1, y, z])))
}

/// All p^2 + p + 1 points of P^2(F_p), sorted.
pub fn all_proj_points(f: &PrimeField) -> Vec<ProjPoint> {
    canonical_triples(*f)
        .map(|[x, y, z]| ProjPoint { x, y, z })
        .collect()
}

/// All p^2 + p + 1 lines of P^2(F_p), sorted.
pub fn all_proj_lines(f: &PrimeField) -> Vec<ProjLine> {
    canonical_triples(*f)
        .map(|[a, b, c]| ProjLine { a, b, c })
        .collect()
}

pub fn all_affine_points(f: &PrimeField) -> Vec<AffinePoint> {
    let p = f.modulus();
    (0..p)
        .flat_map(|x| (0..p).map(move |y| AffinePoint { x, y }))
        .collect()
}

/// All p^2 + p affine lines, sorted.
pub fn all_affine_lines(f: &PrimeField) -> Vec<Line> {
    all_proj_lines(f).iter().filter_map(ProjLine::to_affine).collect()
}

type Mat3 = [[u64; 3]; 3];

/// An invertible 3x3 matrix acting on P^2(F_p).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProjectiveMap {
    pub field: PrimeField,
    pub matrix: Mat3,
}

fn det3(f: &PrimeField, m: &Mat3) -> u64 {
    let minor = |r1: usize, r2: usize, c1: usize, c2: usize| {
        f.sub(f.mul(m[r1][c1], m[r2][c2]), f.mul(m[r1][c2], m[r2][c1]))
    };
    let t0 = f.mul(m[0][0], minor(1, 2, 1, 2));
    let t1 = f.mul(m[0][1], minor(1, 2, 0, 2));
    let t2 = f.mul(m[0][2], minor(1, 2, 0, 1));
    f.add(f.sub(t0, t1), t2)
}

fn inverse3(f: &PrimeField, m: &Mat3) -> Result<Mat3> {
    let d = det3(f, m);
    if d == 0 {
        return Err(Error::SingularMatrix);
    }
    let dinv = f.inv(d)?;
    let mut out = [[0u64; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            // cofactor C_ji, i.e. adjugate entry (i, j)
            let rows: Vec<usize> = (0..3).filter(|&r| r != j).collect();
            let cols: Vec<usize> = (0..3).filter(|&c| c != i).collect();
            let minor = f.sub(
                f.mul(m[rows[0]][cols[0]], m[rows[1]][cols[1]]),
                f.mul(m[rows[0]][cols[1]], m[rows[1]][cols[0]]),
            );
            let cof = if (i + j) % 2 == 0 { minor } else { f.neg(minor) };
            *cell = f.mul(cof, dinv);
        }
    }
    Ok(out)
}

fn mat_vec(f: &PrimeField, m: &Mat3, v: [u64; 3]) -> [u64; 3] {
    [dot(f, m[0], v), dot(f, m[1], v), dot(f, m[2], v)]
}

impl ProjectiveMap {
    pub fn new(field: PrimeField, matrix: Mat3) -> Result<Self> {
        let p = field.modulus();
        let matrix = matrix.map(|row| row.map(|c| c % p));
        if det3(&field, &matrix) == 0 {
            return Err(Error::SingularMatrix);
        }
        Ok(ProjectiveMap { field, matrix })
    }

    pub fn identity(field: PrimeField) -> Self {
        ProjectiveMap {
            field,
            matrix: [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
        }
    }

    pub fn determinant(&self) -> u64 {
        det3(&self.field, &self.matrix)
    }

    pub fn inverse(&self) -> ProjectiveMap {
        ProjectiveMap {
            field: self.field,
            matrix: inverse3(&self.field, &self.matrix).expect("map is invertible by construction"),
        }
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &ProjectiveMap) -> ProjectiveMap {
        let f = &self.field;
        let mut out = [[0u64; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).fold(0, |acc, k| f.add(acc, f.mul(self.matrix[i][k], other.matrix[k][j])));
            }
        }
        ProjectiveMap {
            field: self.field,
            matrix: out,
        }
    }

    pub fn apply(&self, pt: &ProjPoint) -> ProjPoint {
        ProjPoint::from_triple(&self.field, mat_vec(&self.field, &self.matrix, pt.triple()))
            .expect("invertible map sends nonzero vectors to nonzero vectors")
    }

    /// Action on lines by the inverse transpose, so incidence is preserved.
    pub fn apply_line(&self, l: &ProjLine) -> ProjLine {
        let f = &self.field;
        let inv = inverse3(f, &self.matrix).expect("map is invertible by construction");
        let v = l.triple();
        let image = [0, 1, 2].map(|j| (0..3).fold(0, |acc, i| f.add(acc, f.mul(v[i], inv[i][j]))));
        ProjLine::from_triple(f, image).expect("invertible map sends nonzero vectors to nonzero vectors")
    }
}

pub fn apply_map(m: &ProjectiveMap, pt: &ProjPoint) -> ProjPoint {
    m.apply(pt)
}

pub fn apply_map_line(m: &ProjectiveMap, l: &ProjLine) -> ProjLine {
    m.apply_line(l)
}

/// A projective map sending `pbar` to [0:1:0] and `ptil` to [1:0:0].
///
/// The pair is completed to a projective frame: the third base point is the
/// first point (in sorted order) off the line joining them, the fourth is the
/// first point off all three lines through pairs of base points, and is sent
/// to [1:1:1]. In the chart z = 1, lines through `pbar` become vertical and
/// lines through `ptil` become horizontal.
pub fn map_to_infinity(f: &PrimeField, pbar: &ProjPoint, ptil: &ProjPoint) -> Result<ProjectiveMap> {
    let base = proj_line_through(f, pbar, ptil)?;
    let third = canonical_triples(*f)
        .map(|[x, y, z]| ProjPoint { x, y, z })
        .find(|q| !proj_incident(f, q, &base))
        .expect("a projective plane is not a single line");
    let sides = [
        base,
        proj_line_through(f, pbar, &third)?,
        proj_line_through(f, ptil, &third)?,
    ];
    let unit = canonical_triples(*f)
        .map(|[x, y, z]| ProjPoint { x, y, z })
        .find(|q| sides.iter().all(|l| !proj_incident(f, q, l)))
        .expect("three lines never cover P^2(F_p) for p >= 3");

    // Columns ptil, pbar, third, scaled so that their sum is `unit`.
    let cols = [ptil.triple(), pbar.triple(), third.triple()];
    let frame: Mat3 = [0, 1, 2].map(|r| [cols[0][r], cols[1][r], cols[2][r]]);
    let weights = mat_vec(f, &inverse3(f, &frame)?, unit.triple());
    let scaled: Mat3 = [0, 1, 2].map(|r| [0, 1, 2].map(|c| f.mul(frame[r][c], weights[c])));
    Ok(ProjectiveMap {
        field: *f,
        matrix: inverse3(f, &scaled)?,
    })
}
