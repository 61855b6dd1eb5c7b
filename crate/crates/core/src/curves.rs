//! Space-filling curve serialization of 3-D points.
//!
//! Points in `[-1, 1]^3` are quantized onto a `2^b` grid per axis and ordered
//! by Hilbert or Morton (Z-order) code. The "trans" variants apply the same
//! curve to cyclically permuted axes `(x, y, z) -> (y, z, x)`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const DEFAULT_BITS: u32 = 10;
pub const MAX_BITS: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridCoord {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl GridCoord {
    pub fn new(x: u32, y: u32, z: u32) -> Self {
        GridCoord { x, y, z }
    }

    /// Cyclic axis permutation used by the trans- variants.
    pub fn rotated(self) -> Self {
        GridCoord::new(self.y, self.z, self.x)
    }

    fn check(self, bits: u32) -> Result<()> {
        check_bits(bits)?;
        let limit = 1u64 << bits;
        if [self.x, self.y, self.z].iter().any(|&c| c as u64 >= limit) {
            return Err(Error::invalid(format!(
                "grid coordinate {self:?} overflows {bits} bits"
            )));
        }
        Ok(())
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::invalid(format!(
            "bits per axis must be in [1, {MAX_BITS}], got {bits}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveKind {
    Hilbert,
    TransHilbert,
    Morton,
    TransMorton,
    /// Keep tokens in farthest-point-sampling emission order.
    Fps,
}

impl CurveKind {
    pub const ALL: [CurveKind; 5] = [
        CurveKind::Hilbert,
        CurveKind::TransHilbert,
        CurveKind::Morton,
        CurveKind::TransMorton,
        CurveKind::Fps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Hilbert => "hilbert",
            CurveKind::TransHilbert => "trans-hilbert",
            CurveKind::Morton => "morton",
            CurveKind::TransMorton => "trans-morton",
            CurveKind::Fps => "fps",
        }
    }

    /// Curve code of a grid cell; `None` for [`CurveKind::Fps`].
    pub fn code(self, c: GridCoord, bits: u32) -> Result<Option<u64>> {
        Ok(match self {
            CurveKind::Hilbert => Some(hilbert_index(c, bits)?),
            CurveKind::TransHilbert => Some(hilbert_index(c.rotated(), bits)?),
            CurveKind::Morton => Some(morton_index(c, bits)?),
            CurveKind::TransMorton => Some(morton_index(c.rotated(), bits)?),
            CurveKind::Fps => None,
        })
    }
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CurveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CurveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown curve kind {s:?}")))
    }
}

/// Sort order and its inverse.
///
/// `forward[i]` is the original index of the element placed at position `i`;
/// `inverse[j]` is the sorted position of original element `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            forward: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    pub fn from_forward(forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![usize::MAX; n];
        for (pos, &src) in forward.iter().enumerate() {
            if src >= n || inverse[src] != usize::MAX {
                return Err(Error::invalid(format!(
                    "not a permutation: index {src} at position {pos}"
                )));
            }
            inverse[src] = pos;
        }
        Ok(Permutation { forward, inverse })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// Reorders a slice into sorted order.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.forward.iter().map(|&i| items[i].clone()).collect()
    }

    /// Restores the original order of a sorted slice.
    pub fn unapply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.inverse.iter().map(|&i| items[i].clone()).collect()
    }
}

/// Affine map `[-1, 1] -> [0, 2^b - 1]` per axis with clamping and
/// round-half-up.
pub fn quantize(points: &[[f64; 3]], bits: u32) -> Result<Vec<GridCoord>> {
    check_bits(bits)?;
    let max = ((1u64 << bits) - 1) as f64;
    let q = |v: f64| -> u32 {
        let s = (v + 1.0) * 0.5 * max;
        (s + 0.5).floor().clamp(0.0, max) as u32
    };
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("point {i} is not finite: {p:?}")));
            }
            Ok(GridCoord::new(q(p[0]), q(p[1]), q(p[2])))
        })
        .collect()
}

/// 3-D Hilbert index via Skilling's transpose construction. The curve starts
/// at the origin cell and consecutive codes are face-adjacent.
pub fn hilbert_index(c: GridCoord, bits: u32) -> Result<u64> {
    c.check(bits)?;
    let mut x = [c.x, c.y, c.z];
    let m = 1u32 << (bits - 1);

    // inverse undo
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }

    // gray encode
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in &mut x {
        *v ^= t;
    }

    let mut code = 0u64;
    for bit in (0..bits).rev() {
        for v in x {
            code = (code << 1) | ((v >> bit) & 1) as u64;
        }
    }
    Ok(code)
}

pub fn trans_hilbert_index(c: GridCoord, bits: u32) -> Result<u64> {
    hilbert_index(c.rotated(), bits)
}

/// Bit interleave with `x` least significant: code bit `3i` is x bit `i`,
/// `3i+1` is y bit `i`, `3i+2` is z bit `i`.
pub fn morton_index(c: GridCoord, bits: u32) -> Result<u64> {
    c.check(bits)?;
    Ok(spread(c.x) | (spread(c.y) << 1) | (spread(c.z) << 2))
}

fn spread(v: u32) -> u64 {
    let mut x = v as u64 & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f00000000ffff;
    x = (x | (x << 16)) & 0x1f0000ff0000ff;
    x = (x | (x << 8)) & 0x100f00f00f00f00f;
    x = (x | (x << 4)) & 0x10c30c30c30c30c3;
    x = (x | (x << 2)) & 0x1249249249249249;
    x
}

/// Stable ascending sort of points by curve code, ties broken by original
/// index. [`CurveKind::Fps`] yields the identity.
pub fn sort_by_curve(points: &[[f64; 3]], kind: CurveKind, bits: u32) -> Result<Permutation> {
    if points.is_empty() {
        return Err(Error::invalid("cannot sort an empty point set"));
    }
    if kind == CurveKind::Fps {
        return Ok(Permutation::identity(points.len()));
    }
    let cells = quantize(points, bits)?;
    let mut keyed = Vec::with_capacity(cells.len());
    for (i, c) in cells.into_iter().enumerate() {
        let code = kind.code(c, bits)?.expect("curve kinds other than fps have codes");
        keyed.push((code, i));
    }
    keyed.sort_unstable();
    Permutation::from_forward(keyed.into_iter().map(|(_, i)| i).collect())
}
