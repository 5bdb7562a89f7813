//! Finite boxes of Z^d, l∞ neighborhoods and local spin patterns.
//!
//! Offsets of the neighborhood cube `[-r, r]^d` are enumerated row-major with
//! the last axis fastest. A local pattern's canonical index reads the offsets
//! in that order as a binary number, most significant bit first, with bit 1
//! meaning spin `+1`. For `d = 1, r = 1` the pattern `(σ(x-1), σ(x), σ(x+1))
//! = (+, -, +)` therefore has index `0b101 = 5`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Spin = i8;

/// Slot value marking an offset that falls outside a non-periodic box.
pub const EXTERIOR: u32 = u32::MAX;

/// Largest neighborhood (in sites) for which patterns fit a `u32` index.
pub const MAX_PATTERN_BITS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Periodic,
    Plus,
    Minus,
    Free,
}

impl Boundary {
    /// Spin read on exterior offsets, if the mode fixes one.
    pub fn exterior_spin(self) -> Option<Spin> {
        match self {
            Boundary::Plus => Some(1),
            Boundary::Minus => Some(-1),
            Boundary::Periodic | Boundary::Free => None,
        }
    }

    /// Pattern bit written for exterior offsets. Free mode writes the neutral
    /// bit 0, which rate tables used in free mode must ignore.
    pub fn exterior_bit(self) -> u32 {
        match self {
            Boundary::Plus => 1,
            _ => 0,
        }
    }

    pub fn flipped(self) -> Boundary {
        match self {
            Boundary::Plus => Boundary::Minus,
            Boundary::Minus => Boundary::Plus,
            b => b,
        }
    }
}

/// A lattice site by absolute coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site(pub Vec<i64>);

impl Site {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coord_sum(&self) -> i64 {
        self.0.iter().sum()
    }
}

/// One entry of a neighborhood: the (unwrapped) site and its index in the
/// geometry, or `None` when the offset lies outside a non-periodic box.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub site: Site,
    pub index: Option<usize>,
}

/// A box of `Z^d` with side lengths, interaction range and boundary mode.
///
/// Sites are indexed row-major (last axis fastest) over local coordinates
/// `0..side`; absolute coordinates are `origin + local`.
#[derive(Clone, Debug)]
pub struct Geometry {
    dim: usize,
    sides: Vec<usize>,
    range: usize,
    boundary: Boundary,
    origin: Vec<i64>,
    n_sites: usize,
    offsets: Vec<Vec<i64>>,
    slots: Vec<u32>,
    parity: Vec<u8>,
}

impl PartialEq for Geometry {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.sides == other.sides
            && self.range == other.range
            && self.boundary == other.boundary
            && self.origin == other.origin
    }
}

impl Geometry {
    pub fn new(sides: Vec<usize>, range: usize, boundary: Boundary) -> Result<Self> {
        let dim = sides.len();
        Self::with_origin(sides, range, boundary, vec![0; dim])
    }

    /// Cube of side `side` in `dim` dimensions.
    pub fn cube(dim: usize, side: usize, range: usize, boundary: Boundary) -> Result<Self> {
        Self::new(vec![side; dim], range, boundary)
    }

    pub fn with_origin(
        sides: Vec<usize>,
        range: usize,
        boundary: Boundary,
        origin: Vec<i64>,
    ) -> Result<Self> {
        let dim = sides.len();
        if dim == 0 {
            return Err(Error::Invalid("dimension must be at least 1".into()));
        }
        if sides.iter().any(|&s| s == 0) {
            return Err(Error::Invalid("side lengths must be at least 1".into()));
        }
        if range == 0 {
            return Err(Error::Invalid("range must be at least 1".into()));
        }
        if origin.len() != dim {
            return Err(Error::Invalid("origin has wrong dimension".into()));
        }
        let width = 2 * range + 1;
        let nbhd = width
            .checked_pow(dim as u32)
            .filter(|&n| n <= MAX_PATTERN_BITS)
            .ok_or(Error::TooLarge {
                what: "neighborhood",
                size: usize::MAX.min(width.saturating_pow(dim as u32)),
                limit: MAX_PATTERN_BITS,
            })?;
        let n_sites = sides
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .filter(|&n| n < EXTERIOR as usize)
            .ok_or_else(|| Error::Invalid("too many sites".into()))?;

        let offsets = offset_cube(dim, range);
        debug_assert_eq!(offsets.len(), nbhd);

        let mut geom = Geometry {
            dim,
            sides,
            range,
            boundary,
            origin,
            n_sites,
            offsets,
            slots: Vec::with_capacity(n_sites * nbhd),
            parity: Vec::with_capacity(n_sites),
        };
        let mut local = vec![0i64; dim];
        let mut shifted = vec![0i64; dim];
        for i in 0..n_sites {
            geom.local_coords_into(i, &mut local);
            let abs_sum: i64 = local.iter().zip(&geom.origin).map(|(l, o)| l + o).sum();
            geom.parity.push(abs_sum.rem_euclid(2) as u8);
            for off in &geom.offsets {
                for a in 0..dim {
                    shifted[a] = local[a] + off[a];
                }
                let slot = geom.local_index(&shifted).map_or(EXTERIOR, |j| j as u32);
                geom.slots.push(slot);
            }
        }
        Ok(geom)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn sides(&self) -> &[usize] {
        &self.sides
    }
    pub fn range(&self) -> usize {
        self.range
    }
    pub fn boundary(&self) -> Boundary {
        self.boundary
    }
    pub fn origin(&self) -> &[i64] {
        &self.origin
    }
    pub fn n_sites(&self) -> usize {
        self.n_sites
    }
    /// Number of offsets in the neighborhood cube, `(2r+1)^d`.
    pub fn pattern_len(&self) -> usize {
        self.offsets.len()
    }
    pub fn offsets(&self) -> &[Vec<i64>] {
        &self.offsets
    }
    pub fn center_slot(&self) -> usize {
        self.offsets.len() / 2
    }

    /// Same box with another boundary mode.
    pub fn with_boundary(&self, boundary: Boundary) -> Geometry {
        let mut g = self.clone();
        if boundary == Boundary::Periodic || self.boundary == Boundary::Periodic {
            return Geometry::with_origin(self.sides.clone(), self.range, boundary, self.origin.clone())
                .expect("geometry parameters already validated");
        }
        g.boundary = boundary;
        g
    }

    /// Neighbor slots of site `x`, in canonical offset order.
    #[inline]
    pub fn slots(&self, x: usize) -> &[u32] {
        let n = self.offsets.len();
        &self.slots[x * n..(x + 1) * n]
    }

    /// Parity of the absolute coordinate sum of site `x`.
    #[inline]
    pub fn parity(&self, x: usize) -> u8 {
        self.parity[x]
    }

    fn local_coords_into(&self, mut i: usize, out: &mut [i64]) {
        for a in (0..self.dim).rev() {
            out[a] = (i % self.sides[a]) as i64;
            i /= self.sides[a];
        }
    }

    fn local_index(&self, local: &[i64]) -> Option<usize> {
        let mut idx = 0usize;
        for a in 0..self.dim {
            let side = self.sides[a] as i64;
            let c = if self.boundary == Boundary::Periodic {
                local[a].rem_euclid(side)
            } else if (0..side).contains(&local[a]) {
                local[a]
            } else {
                return None;
            };
            idx = idx * self.sides[a] + c as usize;
        }
        Some(idx)
    }

    /// Absolute coordinates of site `i`.
    pub fn site(&self, i: usize) -> Site {
        let mut local = vec![0i64; self.dim];
        self.local_coords_into(i, &mut local);
        Site(local.iter().zip(&self.origin).map(|(l, o)| l + o).collect())
    }

    /// Index of the site with the given absolute coordinates. Periodic boxes
    /// wrap; other modes return `None` outside the box.
    pub fn index_of(&self, site: &Site) -> Option<usize> {
        if site.dim() != self.dim {
            return None;
        }
        let local: Vec<i64> = site.0.iter().zip(&self.origin).map(|(c, o)| c - o).collect();
        self.local_index(&local)
    }

    /// The site at absolute coordinates `origin` (the lower corner), which
    /// experiments treat as the lattice origin on periodic boxes.
    pub fn origin_index(&self) -> usize {
        0
    }

    /// Site nearest the geometric center: local coordinate `side / 2` on each
    /// axis (the floor-half site for even sides).
    pub fn center_index(&self) -> usize {
        self.sides.iter().fold(0, |acc, &s| acc * s + s / 2)
    }

    /// All sites within l∞ distance `r` of `x`, in canonical offset order.
    pub fn neighborhood(&self, x: usize) -> Vec<Neighbor> {
        let base = self.site(x);
        self.offsets
            .iter()
            .zip(self.slots(x))
            .map(|(off, &slot)| {
                let index = (slot != EXTERIOR).then_some(slot as usize);
                let site = match index {
                    Some(j) if self.boundary == Boundary::Periodic => self.site(j),
                    _ => Site(base.0.iter().zip(off).map(|(c, o)| c + o).collect()),
                };
                Neighbor { site, index }
            })
            .collect()
    }

    /// Canonical pattern index of the neighborhood of `x` in `config`.
    #[inline]
    pub fn pattern_index(&self, config: &SpinConfig, x: usize) -> u32 {
        let ext = self.boundary.exterior_bit();
        let mut idx = 0u32;
        for &slot in self.slots(x) {
            let bit = if slot == EXTERIOR { ext } else { config.bit(slot as usize) };
            idx = (idx << 1) | bit;
        }
        idx
    }

    /// Bit mask (over pattern positions) of offsets that are exterior for at
    /// least one site.
    pub fn exterior_mask(&self) -> u32 {
        let n = self.offsets.len();
        let mut mask = 0u32;
        for x in 0..self.n_sites {
            for (p, &slot) in self.slots(x).iter().enumerate() {
                if slot == EXTERIOR {
                    mask |= 1 << (n - 1 - p);
                }
            }
        }
        mask
    }
}

/// Offsets of `[-r, r]^d`, row-major, last axis fastest.
pub fn offset_cube(dim: usize, range: usize) -> Vec<Vec<i64>> {
    let width = 2 * range + 1;
    let total = width.pow(dim as u32);
    (0..total)
        .map(|mut k| {
            let mut off = vec![0i64; dim];
            for a in (0..dim).rev() {
                off[a] = (k % width) as i64 - range as i64;
                k /= width;
            }
            off
        })
        .collect()
}

/// Position of `off` in the canonical order of `[-r, r]^d`, if inside.
pub fn offset_position(dim: usize, range: usize, off: &[i64]) -> Option<usize> {
    if off.len() != dim {
        return None;
    }
    let width = 2 * range + 1;
    let mut pos = 0usize;
    for &o in off {
        if o.unsigned_abs() as usize > range {
            return None;
        }
        pos = pos * width + (o + range as i64) as usize;
    }
    Some(pos)
}

/// Spin configuration on a geometry, one bit per site (1 ⇔ +1), row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpinConfig {
    n: usize,
    words: Vec<u64>,
}

impl SpinConfig {
    pub fn all_plus(n: usize) -> Self {
        let mut words = vec![u64::MAX; n.div_ceil(64)];
        if n % 64 != 0 {
            if let Some(last) = words.last_mut() {
                *last = (1u64 << (n % 64)) - 1;
            }
        }
        SpinConfig { n, words }
    }

    pub fn all_minus(n: usize) -> Self {
        SpinConfig {
            n,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn uniform(n: usize, spin: Spin) -> Self {
        if spin > 0 {
            Self::all_plus(n)
        } else {
            Self::all_minus(n)
        }
    }

    pub fn from_spins(spins: &[Spin]) -> Self {
        let mut c = Self::all_minus(spins.len());
        for (i, &s) in spins.iter().enumerate() {
            if s > 0 {
                c.set(i, 1);
            }
        }
        c
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn bit(&self, i: usize) -> u32 {
        ((self.words[i >> 6] >> (i & 63)) & 1) as u32
    }

    #[inline]
    pub fn get(&self, i: usize) -> Spin {
        if self.bit(i) == 1 {
            1
        } else {
            -1
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, spin: Spin) {
        let mask = 1u64 << (i & 63);
        if spin > 0 {
            self.words[i >> 6] |= mask;
        } else {
            self.words[i >> 6] &= !mask;
        }
    }

    pub fn spins(&self) -> Vec<Spin> {
        (0..self.n).map(|i| self.get(i)).collect()
    }

    pub fn plus_count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Spin sum `Σ σ(x)`.
    pub fn magnetization(&self) -> i64 {
        2 * self.plus_count() as i64 - self.n as i64
    }

    /// Sitewise order `self ≥ other`.
    pub fn dominates(&self, other: &SpinConfig) -> bool {
        self.n == other.n && self.words.iter().zip(&other.words).all(|(a, b)| b & !a == 0)
    }

    /// Number of sites where the two configurations differ.
    pub fn disagreements(&self, other: &SpinConfig) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    pub fn as_words(&self) -> &[u64] {
        &self.words
    }
}

/// A local pattern on the offset cube with its canonical index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LocalPattern {
    pub index: u32,
    pub len: u32,
}

impl LocalPattern {
    pub fn new(index: u32, len: usize) -> Self {
        debug_assert!(len <= MAX_PATTERN_BITS);
        LocalPattern {
            index,
            len: len as u32,
        }
    }

    pub fn from_spins(spins: &[Spin]) -> Self {
        let index = spins.iter().fold(0u32, |acc, &s| (acc << 1) | u32::from(s > 0));
        LocalPattern::new(index, spins.len())
    }

    /// Spin at pattern position `p` (canonical offset order).
    #[inline]
    pub fn spin(&self, p: usize) -> Spin {
        if (self.index >> (self.len as usize - 1 - p)) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn center(&self) -> Spin {
        self.spin(self.len as usize / 2)
    }

    pub fn spins(&self) -> Vec<Spin> {
        (0..self.len as usize).map(|p| self.spin(p)).collect()
    }

    /// Bit mask of pattern position `p`.
    #[inline]
    pub fn position_mask(len: usize, p: usize) -> u32 {
        1 << (len - 1 - p)
    }
}

/// Pattern of `config` around `x`: interior offsets read the configuration,
/// exterior offsets read the boundary spin (plus/minus) or the neutral bit 0
/// (free). Rate families reject tables that depend on neutral bits; see
/// [`crate::rates::RateFamily::validate_for`].
pub fn pattern_of(config: &SpinConfig, x: usize, geom: &Geometry) -> Result<LocalPattern> {
    if config.len() != geom.n_sites() {
        return Err(Error::GeometryMismatch(format!(
            "config has {} sites, geometry {}",
            config.len(),
            geom.n_sites()
        )));
    }
    if x >= geom.n_sites() {
        return Err(Error::Invalid(format!("site {x} outside geometry")));
    }
    Ok(LocalPattern::new(geom.pattern_index(config, x), geom.pattern_len()))
}

/// Writes the interior spins of `pattern` into `config` around `x`.
pub fn write_pattern(config: &mut SpinConfig, x: usize, geom: &Geometry, pattern: LocalPattern) {
    for (p, &slot) in geom.slots(x).iter().enumerate() {
        if slot != EXTERIOR {
            config.set(slot as usize, pattern.spin(p));
        }
    }
}
