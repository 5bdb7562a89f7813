//! Finite-range flip rates as dense tables over local patterns.
//!
//! Glauber rates use `c_x(σ) = exp(-β σ(x) h_eff(σ))` with
//! `h_eff = h + Σ_y J_xy σ(y)`, which is reversible for the weight
//! `exp(-β H)`, `H = -Σ_{pairs} J σσ - Σ h σ` (each unordered pair once).

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::GibbsSpec;
use crate::lattice::{offset_cube, offset_position, Boundary, Geometry, LocalPattern, SpinConfig};

/// Longest pattern (in sites) a dense table may be built for.
pub const MAX_TABLE_BITS: usize = 27;

/// How sites select a table variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteClass {
    /// One table everywhere.
    Uniform,
    /// Table 0 on sites with even coordinate sum, table 1 on odd.
    Parity,
}

/// A flip-rate function of the local pattern, possibly modulated by site class.
#[derive(Clone, Debug, PartialEq)]
pub struct RateFamily {
    dim: usize,
    range: usize,
    class: SiteClass,
    tables: Vec<Vec<f64>>,
    sup_rate: f64,
}

impl RateFamily {
    pub fn from_table(dim: usize, range: usize, table: Vec<f64>) -> Result<Self> {
        Self::build(dim, range, SiteClass::Uniform, vec![table])
    }

    pub fn from_fn(dim: usize, range: usize, f: impl Fn(LocalPattern) -> f64) -> Result<Self> {
        let len = pattern_len(dim, range)?;
        let table = (0..1u32 << len).map(|i| f(LocalPattern::new(i, len))).collect();
        Self::from_table(dim, range, table)
    }

    /// Constant rate `c` on every pattern.
    pub fn constant(dim: usize, range: usize, c: f64) -> Result<Self> {
        Self::from_fn(dim, range, |_| c)
    }

    /// Parity-modulated family: `even` on even sites, `odd` on odd sites.
    pub fn with_parity(even: RateFamily, odd: RateFamily) -> Result<Self> {
        if even.class != SiteClass::Uniform || odd.class != SiteClass::Uniform {
            return Err(Error::Invalid("parity variants must be uniform families".into()));
        }
        let range = even.range.max(odd.range);
        let even = even.padded(range)?;
        let odd = odd.padded(range)?;
        if even.dim != odd.dim {
            return Err(Error::Invalid("parity variants differ in dimension".into()));
        }
        Self::build(
            even.dim,
            range,
            SiteClass::Parity,
            vec![even.tables[0].clone(), odd.tables[0].clone()],
        )
    }

    fn build(dim: usize, range: usize, class: SiteClass, tables: Vec<Vec<f64>>) -> Result<Self> {
        let len = pattern_len(dim, range)?;
        for t in &tables {
            if t.len() != 1usize << len {
                return Err(Error::Invalid(format!(
                    "rate table has {} entries, expected {}",
                    t.len(),
                    1usize << len
                )));
            }
            if let Some(v) = t.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::Invalid(format!("rate entry {v} is not a finite nonnegative number")));
            }
        }
        let sup_rate = tables.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
        Ok(RateFamily {
            dim,
            range,
            class,
            tables,
            sup_rate,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn range(&self) -> usize {
        self.range
    }
    pub fn class(&self) -> SiteClass {
        self.class
    }
    pub fn sup_rate(&self) -> f64 {
        self.sup_rate
    }
    pub fn tables(&self) -> &[Vec<f64>] {
        &self.tables
    }
    pub fn pattern_len(&self) -> usize {
        (2 * self.range + 1).pow(self.dim as u32)
    }
    pub fn is_translation_invariant(&self) -> bool {
        self.class == SiteClass::Uniform || self.tables[0] == self.tables[1]
    }

    /// Table index used at site `x`.
    #[inline]
    pub fn variant(&self, geom: &Geometry, x: usize) -> usize {
        match self.class {
            SiteClass::Uniform => 0,
            SiteClass::Parity => geom.parity(x) as usize,
        }
    }

    #[inline]
    pub fn table_for(&self, geom: &Geometry, x: usize) -> &[f64] {
        &self.tables[self.variant(geom, x)]
    }

    /// Rate of `pattern` under table variant `variant`.
    #[inline]
    pub fn rate(&self, variant: usize, pattern: u32) -> f64 {
        self.tables[variant][pattern as usize]
    }

    /// Flip rate of site `x` in `config`.
    pub fn rate_at(&self, geom: &Geometry, config: &SpinConfig, x: usize) -> f64 {
        self.table_for(geom, x)[geom.pattern_index(config, x) as usize]
    }

    /// The same family on a larger offset cube; new offsets are ignored.
    pub fn padded(&self, new_range: usize) -> Result<RateFamily> {
        if new_range < self.range {
            return Err(Error::Invalid("cannot shrink the range of a rate family".into()));
        }
        if new_range == self.range {
            return Ok(self.clone());
        }
        let new_len = pattern_len(self.dim, new_range)?;
        let old_len = self.pattern_len();
        // for each old position, the new position carrying the same offset
        let map: Vec<usize> = offset_cube(self.dim, self.range)
            .iter()
            .map(|o| offset_position(self.dim, new_range, o).expect("old cube inside new cube"))
            .collect();
        let tables = self
            .tables
            .iter()
            .map(|t| {
                (0..1u32 << new_len)
                    .map(|idx| {
                        let old = map.iter().fold(0u32, |acc, &np| {
                            (acc << 1) | ((idx >> (new_len - 1 - np)) & 1)
                        });
                        debug_assert!(old < 1 << old_len);
                        t[old as usize]
                    })
                    .collect()
            })
            .collect();
        Self::build(self.dim, new_range, self.class, tables)
    }

    /// Checks that the family can run on `geom`: same dimension and range, and
    /// in free mode no dependence on offsets that may fall outside the box.
    pub fn validate_for(&self, geom: &Geometry) -> Result<()> {
        if geom.dim() != self.dim || geom.range() != self.range {
            return Err(Error::GeometryMismatch(format!(
                "rates have d={}, r={}; geometry has d={}, r={}",
                self.dim,
                self.range,
                geom.dim(),
                geom.range()
            )));
        }
        if geom.boundary() == Boundary::Free {
            let len = self.pattern_len();
            let mask = geom.exterior_mask();
            for p in 0..len {
                let bit = 1u32 << (len - 1 - p);
                if mask & bit == 0 {
                    continue;
                }
                for t in &self.tables {
                    if (0..t.len()).any(|i| t[i] != t[i ^ bit as usize]) {
                        return Err(Error::ExteriorDependence { bit: p });
                    }
                }
            }
        }
        Ok(())
    }

    /// Attractivity over covering pairs of patterns (one non-center bit
    /// raised), which implies it for all comparable pairs. Returns the first
    /// violating pair `(higher, lower)`.
    pub fn is_attractive(&self) -> (bool, Option<(LocalPattern, LocalPattern)>) {
        let len = self.pattern_len();
        let center = 1u32 << (len / 2);
        for t in &self.tables {
            for lo in 0..(1u32 << len) {
                for p in 0..len {
                    let bit = 1u32 << p;
                    if bit == center || lo & bit != 0 {
                        continue;
                    }
                    let hi = lo | bit;
                    let (c_hi, c_lo) = (t[hi as usize], t[lo as usize]);
                    let ok = if lo & center == 0 { c_hi >= c_lo } else { c_lo >= c_hi };
                    if !ok {
                        return (false, Some((LocalPattern::new(hi, len), LocalPattern::new(lo, len))));
                    }
                }
            }
        }
        (true, None)
    }

    /// Random attractive table on `[0, max_rate]`: monotone envelopes of i.i.d.
    /// uniform entries, nondecreasing in the pattern when the center is −1 and
    /// nonincreasing when it is +1.
    pub fn random_attractive<R: Rng + ?Sized>(
        dim: usize,
        range: usize,
        max_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let len = pattern_len(dim, range)?;
        let n = 1usize << len;
        let center = 1usize << (len / 2);
        let mut t: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * max_rate).collect();
        for p in 0..len {
            let bit = 1usize << p;
            if bit == center {
                continue;
            }
            for i in 0..n {
                if i & bit == 0 {
                    continue;
                }
                let lo = i ^ bit;
                if i & center == 0 {
                    t[i] = t[i].max(t[lo]);
                } else {
                    t[lo] = t[lo].max(t[i]);
                }
            }
        }
        Self::from_table(dim, range, t)
    }

    /// Writes `variant,index,pattern,rate` rows, pattern as a `+`/`-` string
    /// in canonical offset order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let len = self.pattern_len();
        writeln!(w, "variant,index,pattern,rate")?;
        for (v, t) in self.tables.iter().enumerate() {
            for (i, rate) in t.iter().enumerate() {
                let pat: String = LocalPattern::new(i as u32, len)
                    .spins()
                    .iter()
                    .map(|&s| if s > 0 { '+' } else { '-' })
                    .collect();
                writeln!(w, "{v},{i},{pat},{rate:e}")?;
            }
        }
        Ok(())
    }
}

fn pattern_len(dim: usize, range: usize) -> Result<usize> {
    if dim == 0 || range == 0 {
        return Err(Error::Invalid("rates need d ≥ 1 and r ≥ 1".into()));
    }
    let len = (2 * range + 1)
        .checked_pow(dim as u32)
        .unwrap_or(usize::MAX);
    if len > MAX_TABLE_BITS {
        return Err(Error::TooLarge {
            what: "rate table pattern",
            size: len,
            limit: MAX_TABLE_BITS,
        });
    }
    Ok(len)
}

/// Symmetric pair couplings as `(offset, J)` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingKernel {
    dim: usize,
    entries: Vec<(Vec<i64>, f64)>,
}

impl CouplingKernel {
    /// Requires every offset `o` to come with `-o` carrying the same coupling.
    /// Offsets must be nonzero and listed once.
    pub fn new(dim: usize, entries: Vec<(Vec<i64>, f64)>) -> Result<Self> {
        for (i, (o, j)) in entries.iter().enumerate() {
            if o.len() != dim {
                return Err(Error::Invalid(format!("coupling offset {o:?} is not {dim}-dimensional")));
            }
            if o.iter().all(|&c| c == 0) {
                return Err(Error::Invalid("coupling offset must be nonzero".into()));
            }
            if !j.is_finite() {
                return Err(Error::Invalid(format!("coupling {j} is not finite")));
            }
            if entries[..i].iter().any(|(p, _)| p == o) {
                return Err(Error::Invalid(format!("coupling offset {o:?} listed twice")));
            }
            let neg: Vec<i64> = o.iter().map(|c| -c).collect();
            match entries.iter().find(|(p, _)| *p == neg) {
                Some((_, jn)) if jn == j => {}
                _ => {
                    return Err(Error::Invalid(format!(
                        "coupling kernel is not symmetric at offset {o:?}"
                    )))
                }
            }
        }
        Ok(CouplingKernel { dim, entries })
    }

    /// Adds the mirror image of every entry.
    pub fn symmetrized(dim: usize, half: Vec<(Vec<i64>, f64)>) -> Result<Self> {
        let mut entries = Vec::with_capacity(2 * half.len());
        for (o, j) in half {
            let neg: Vec<i64> = o.iter().map(|c| -c).collect();
            entries.push((o, j));
            entries.push((neg, j));
        }
        Self::new(dim, entries)
    }

    /// Coupling `j` between l1 nearest neighbors.
    pub fn nearest_neighbor(dim: usize, j: f64) -> Self {
        let mut entries = Vec::with_capacity(2 * dim);
        for a in 0..dim {
            for s in [-1, 1] {
                let mut o = vec![0; dim];
                o[a] = s;
                entries.push((o, j));
            }
        }
        CouplingKernel { dim, entries }
    }

    pub fn zero(dim: usize) -> Self {
        CouplingKernel {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(Vec<i64>, f64)] {
        &self.entries
    }

    /// Largest l∞ length of an offset carrying nonzero coupling.
    pub fn range(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, j)| *j != 0.0)
            .flat_map(|(o, _)| o.iter().map(|c| c.unsigned_abs() as usize))
            .max()
            .unwrap_or(0)
    }

    pub fn is_ferromagnetic(&self) -> bool {
        self.entries.iter().all(|(_, j)| *j >= 0.0)
    }

    /// Entries whose offset is lexicographically positive: each unordered
    /// pair `{x, x+o}` appears once.
    pub fn positive_half(&self) -> impl Iterator<Item = &(Vec<i64>, f64)> {
        self.entries
            .iter()
            .filter(|(o, _)| o.iter().find(|&&c| c != 0).is_some_and(|&c| c > 0))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        CouplingKernel {
            dim: self.dim,
            entries: self.entries.iter().map(|(o, j)| (o.clone(), j * factor)).collect(),
        }
    }
}

/// Glauber table `exp(sign · β σ(x) h_eff)` on the `[-range, range]^d` cube.
fn glauber_table(kernel: &CouplingKernel, h: f64, beta: f64, range: usize, sign: f64) -> Result<Vec<f64>> {
    let dim = kernel.dim();
    let len = pattern_len(dim, range)?;
    let center = len / 2;
    let terms: Vec<(usize, f64)> = kernel
        .entries()
        .iter()
        .map(|(o, j)| {
            offset_position(dim, range, o)
                .map(|p| (p, *j))
                .ok_or_else(|| Error::Invalid(format!("coupling offset {o:?} exceeds range {range}")))
        })
        .collect::<Result<_>>()?;
    Ok((0..1u32 << len)
        .map(|i| {
            let pat = LocalPattern::new(i, len);
            let h_eff = h + terms.iter().map(|&(p, j)| j * f64::from(pat.spin(p))).sum::<f64>();
            (sign * beta * f64::from(pat.spin(center)) * h_eff).exp()
        })
        .collect())
}

/// Glauber rates for an arbitrary (possibly antiferromagnetic) kernel.
pub fn glauber_general(kernel: &CouplingKernel, h: f64, beta: f64, range: usize) -> Result<RateFamily> {
    if !beta.is_finite() || beta < 0.0 || !h.is_finite() {
        return Err(Error::Invalid("β must be finite and nonnegative, h finite".into()));
    }
    let t = glauber_table(kernel, h, beta, range, -1.0)?;
    RateFamily::from_table(kernel.dim(), range, t)
}

/// Ferromagnetic Glauber rates on `geom` (range taken from the geometry).
pub fn glauber_rates(kernel: &CouplingKernel, h: f64, beta: f64, geom: &Geometry) -> Result<RateFamily> {
    if !kernel.is_ferromagnetic() {
        return Err(Error::Invalid("glauber_rates requires J ≥ 0".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::Invalid("β must be positive".into()));
    }
    if kernel.dim() != geom.dim() {
        return Err(Error::GeometryMismatch("kernel and geometry dimensions differ".into()));
    }
    let c = glauber_general(kernel, h, beta, geom.range())?;
    c.validate_for(geom)?;
    Ok(c)
}

/// Two rate families with the shared uniformization rate and their distance.
#[derive(Clone, Debug)]
pub struct CoupledRates {
    pub c0: RateFamily,
    pub c1: RateFamily,
    pub lambda: f64,
    pub epsilon: f64,
}

impl CoupledRates {
    /// Pads both families to a common range and sets `λ = 2 max sup`.
    pub fn new(c0: RateFamily, c1: RateFamily) -> Result<Self> {
        let range = c0.range().max(c1.range());
        let c0 = c0.padded(range)?;
        let c1 = c1.padded(range)?;
        let epsilon = epsilon(&c0, &c1)?;
        let lambda = uniformization_rate(&[&c0, &c1]);
        Ok(CoupledRates {
            c0,
            c1,
            lambda,
            epsilon,
        })
    }
}

/// `2 · max` of the sup rates.
pub fn uniformization_rate(families: &[&RateFamily]) -> f64 {
    2.0 * families.iter().fold(0.0f64, |m, c| m.max(c.sup_rate()))
}

/// `2 · max |c0 − c1|` over patterns and site classes.
pub fn epsilon(c0: &RateFamily, c1: &RateFamily) -> Result<f64> {
    if c0.dim() != c1.dim() {
        return Err(Error::Invalid("families differ in dimension".into()));
    }
    let range = c0.range().max(c1.range());
    let (a, b) = (c0.padded(range)?, c1.padded(range)?);
    let classes = if a.class == SiteClass::Parity || b.class == SiteClass::Parity { 2 } else { 1 };
    let pick = |c: &RateFamily, k: usize| match c.class {
        SiteClass::Uniform => 0,
        SiteClass::Parity => k,
    };
    let mut m = 0.0f64;
    for k in 0..classes {
        let (ta, tb) = (&a.tables[pick(&a, k)], &b.tables[pick(&b, k)]);
        for (x, y) in ta.iter().zip(tb) {
            m = m.max((x - y).abs());
        }
    }
    Ok(2.0 * m)
}

/// Largest relative violation of `π(σ) c_x(σ) = π(σ^x) c_x(σ^x)` over all
/// configurations of `geom` and all sites, with `π` the exact Gibbs law of
/// `spec` (β already absorbed into the spec).
pub fn check_detailed_balance(c: &RateFamily, spec: &GibbsSpec, geom: &Geometry) -> Result<f64> {
    c.validate_for(geom)?;
    if spec.geometry() != geom || spec.region().len() != geom.n_sites() {
        return Err(Error::GeometryMismatch(
            "detailed balance needs a spec on the full box of the rate geometry".into(),
        ));
    }
    let n = geom.n_sites();
    let log_w = spec.log_weights()?;
    let mut worst = 0.0f64;
    let mut config = SpinConfig::all_minus(n);
    for s in 0..(1usize << n) {
        for x in 0..n {
            config.set(x, if (s >> x) & 1 == 1 { 1 } else { -1 });
        }
        for x in 0..n {
            let flipped = s ^ (1 << x);
            if flipped < s {
                continue;
            }
            let ca = c.rate_at(geom, &config, x);
            config.set(x, -config.get(x));
            let cb = c.rate_at(geom, &config, x);
            config.set(x, -config.get(x));
            let v = match (ca > 0.0, cb > 0.0) {
                (false, false) => 0.0,
                (true, true) => {
                    let la = log_w[s] + ca.ln();
                    let lb = log_w[flipped] + cb.ln();
                    -(-(la - lb).abs()).exp_m1()
                }
                _ => 1.0,
            };
            worst = worst.max(v);
        }
    }
    Ok(worst)
}

/// Glauber pair with `c1` at `β+δ` on even sites and `β−δ` on odd sites.
pub fn checkerboard_perturbation(
    kernel: &CouplingKernel,
    h: f64,
    beta: f64,
    delta: f64,
    geom: &Geometry,
) -> Result<CoupledRates> {
    if !(delta >= 0.0) || delta > beta {
        return Err(Error::Invalid("checkerboard needs 0 ≤ δ ≤ β".into()));
    }
    let c0 = glauber_rates(kernel, h, beta, geom)?;
    let even = glauber_general(kernel, h, beta + delta, geom.range())?;
    let odd = glauber_general(kernel, h, beta - delta, geom.range())?;
    let c1 = RateFamily::with_parity(even, odd)?;
    c1.validate_for(geom)?;
    CoupledRates::new(c0, c1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn torus(dim: usize, side: usize) -> Geometry {
        Geometry::cube(dim, side, 1, Boundary::Periodic).unwrap()
    }

    /// All comparable pairs, not just covering ones.
    fn attractive_brute(c: &RateFamily) -> bool {
        let len = c.pattern_len();
        let center = 1u32 << (len / 2);
        c.tables().iter().all(|t| {
            (0..1u32 << len).all(|hi| {
                (0..1u32 << len).all(|lo| {
                    if lo & !hi != 0 || (hi ^ lo) & center != 0 {
                        return true;
                    }
                    if lo & center == 0 {
                        t[hi as usize] >= t[lo as usize]
                    } else {
                        t[lo as usize] >= t[hi as usize]
                    }
                })
            })
        })
    }

    #[test]
    fn single_site_glauber_value() {
        let c = glauber_general(&CouplingKernel::zero(1), 0.5, 1.0, 1).unwrap();
        // center is the middle bit of (-1, 0, +1)
        assert!((c.rate(0, 0b010) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((c.rate(0, 0b000) - 0.5f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn chain_all_plus_value() {
        let c = glauber_rates(&CouplingKernel::nearest_neighbor(1, 1.0), 0.0, 0.5, &torus(1, 5)).unwrap();
        assert!((c.rate(0, 0b111) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn single_site_stationary_ratio() {
        // two-state chain: P(+) = c(-) / (c(+) + c(-)) = (1 + tanh(βh)) / 2
        for (beta, h) in [(1.0, 0.5), (0.3, -1.2), (2.0, 0.1)] {
            let c = glauber_general(&CouplingKernel::zero(1), h, beta, 1).unwrap();
            let (up, down) = (c.rate(0, 0b010), c.rate(0, 0b000));
            let p = down / (up + down);
            assert!((p - (1.0 + (beta * h).tanh()) / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_negative_coupling_and_bad_beta() {
        let k = CouplingKernel::nearest_neighbor(1, -1.0);
        assert!(glauber_rates(&k, 0.0, 1.0, &torus(1, 5)).is_err());
        let k = CouplingKernel::nearest_neighbor(1, 1.0);
        assert!(glauber_rates(&k, 0.0, 0.0, &torus(1, 5)).is_err());
    }

    #[test]
    fn kernel_symmetry_enforced() {
        assert!(CouplingKernel::new(1, vec![(vec![1], 1.0)]).is_err());
        assert!(CouplingKernel::new(1, vec![(vec![1], 1.0), (vec![-1], 0.5)]).is_err());
        assert!(CouplingKernel::new(1, vec![(vec![0], 1.0)]).is_err());
        let k = CouplingKernel::symmetrized(2, vec![(vec![1, 0], 1.0), (vec![0, 1], 0.5)]).unwrap();
        assert_eq!(k.entries().len(), 4);
        assert_eq!(k.positive_half().count(), 2);
    }

    #[test]
    fn ferromagnetic_glauber_is_attractive() {
        let c = glauber_rates(&CouplingKernel::nearest_neighbor(2, 1.0), 0.3, 0.7, &torus(2, 4)).unwrap();
        assert!(c.is_attractive().0);
        assert!(attractive_brute(&c));
    }

    #[test]
    fn antiferro_bond_gives_witness() {
        let k = CouplingKernel::new(1, vec![(vec![1], -1.0), (vec![-1], -1.0)]).unwrap();
        let c = glauber_general(&k, 0.0, 1.0, 1).unwrap();
        let (ok, w) = c.is_attractive();
        assert!(!ok);
        assert!(!attractive_brute(&c));
        let (hi, lo) = w.unwrap();
        let t = &c.tables()[0];
        assert_eq!(hi.center(), lo.center());
        assert!(hi.index & lo.index == lo.index && hi.index != lo.index);
        if lo.center() < 0 {
            assert!(t[hi.index as usize] < t[lo.index as usize]);
        } else {
            assert!(t[lo.index as usize] < t[hi.index as usize]);
        }
    }

    #[test]
    fn constant_rates_are_attractive() {
        let c = RateFamily::constant(2, 1, 1.0).unwrap();
        assert!(c.is_attractive().0);
    }

    #[test]
    fn epsilon_examples() {
        let c0 = glauber_general(&CouplingKernel::nearest_neighbor(1, 1.0), 0.1, 0.5, 1).unwrap();
        assert_eq!(epsilon(&c0, &c0).unwrap(), 0.0);
        let mut t = c0.tables()[0].clone();
        t[3] += 0.05;
        let c1 = RateFamily::from_table(1, 1, t).unwrap();
        assert!((epsilon(&c0, &c1).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn checkerboard_epsilon_matches_direct_scan() {
        let g = torus(2, 4);
        let k = CouplingKernel::nearest_neighbor(2, 1.0);
        let cr = checkerboard_perturbation(&k, 0.0, 0.4, 0.02, &g).unwrap();
        // direct scan of both sublattice classes from the closed form
        let mut m = 0.0f64;
        for i in 0..512u32 {
            let p = LocalPattern::new(i, 9);
            let s = f64::from(p.center());
            let field: f64 = [1, 3, 5, 7].iter().map(|&q| f64::from(p.spin(q))).sum();
            for b in [0.42, 0.38] {
                m = m.max(((-b * s * field).exp() - (-0.4 * s * field).exp()).abs());
            }
        }
        assert!((cr.epsilon - 2.0 * m).abs() < 1e-14);
        assert!((epsilon(&cr.c0, &cr.c1).unwrap() - cr.epsilon).abs() < 1e-15);
        assert!((cr.lambda - 2.0 * 1.68f64.exp()).abs() < 1e-12);
        assert!(!cr.c1.is_translation_invariant());
    }

    #[test]
    fn checkerboard_zero_delta() {
        let g = torus(2, 4);
        let cr = checkerboard_perturbation(&CouplingKernel::nearest_neighbor(2, 1.0), 0.0, 0.4, 0.0, &g).unwrap();
        assert_eq!(cr.epsilon, 0.0);
        assert_eq!(cr.c1.tables()[0], cr.c0.tables()[0]);
        assert_eq!(cr.c1.tables()[1], cr.c0.tables()[0]);
    }

    #[test]
    fn padding_preserves_rates() {
        let g1 = Geometry::cube(1, 7, 1, Boundary::Periodic).unwrap();
        let g2 = Geometry::cube(1, 7, 2, Boundary::Periodic).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = RateFamily::random_attractive(1, 1, 2.0, &mut rng).unwrap();
        let p = c.padded(2).unwrap();
        for s in 0..128u32 {
            let cfg = SpinConfig::from_spins(&(0..7).map(|i| if (s >> i) & 1 == 1 { 1 } else { -1 }).collect::<Vec<_>>());
            for x in 0..7 {
                assert_eq!(c.rate_at(&g1, &cfg, x), p.rate_at(&g2, &cfg, x));
            }
        }
        assert!(p.is_attractive().0);
    }

    #[test]
    fn free_mode_rejects_exterior_dependence() {
        let g = Geometry::cube(1, 4, 1, Boundary::Free).unwrap();
        let c = glauber_general(&CouplingKernel::nearest_neighbor(1, 1.0), 0.0, 1.0, 1).unwrap();
        assert!(matches!(c.validate_for(&g), Err(Error::ExteriorDependence { .. })));
        let c = glauber_general(&CouplingKernel::zero(1), 0.3, 1.0, 1).unwrap();
        assert!(c.validate_for(&g).is_ok());
    }

    #[test]
    fn detailed_balance_adopted_and_printed_sign() {
        let g = torus(1, 4);
        let k = CouplingKernel::nearest_neighbor(1, 1.0);
        let (beta, h) = (0.7, 0.3);
        let spec = GibbsSpec::on_box(&g, k.scaled(beta), beta * h).unwrap();
        let c = glauber_rates(&k, h, beta, &g).unwrap();
        assert!(check_detailed_balance(&c, &spec, &g).unwrap() < 1e-12);
        let printed = RateFamily::from_table(1, 1, glauber_table(&k, h, beta, 1, 1.0).unwrap()).unwrap();
        assert!(check_detailed_balance(&printed, &spec, &g).unwrap() > 0.5);
        let c0 = glauber_rates(&CouplingKernel::zero(1), 0.8, beta, &g).unwrap();
        let spec0 = GibbsSpec::on_box(&g, CouplingKernel::zero(1), beta * 0.8).unwrap();
        assert!(check_detailed_balance(&c0, &spec0, &g).unwrap() < 1e-14);
    }

    #[test]
    fn csv_export_lists_every_pattern() {
        let c = RateFamily::constant(1, 1, 1.0).unwrap();
        let mut out = Vec::new();
        c.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s.lines().count(), 9);
        assert!(s.contains("0,5,+-+,1e0"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]
        #[test]
        fn glauber_sweep_attractive(j1 in 0.0..2.0f64, j2 in 0.0..2.0f64, h in -2.0..2.0f64, beta in 0.01..2.0f64) {
            let k = CouplingKernel::symmetrized(2, vec![(vec![1, 0], j1), (vec![0, 1], j2), (vec![1, 1], j1 * j2)]).unwrap();
            let c = glauber_general(&k, h, beta, 1).unwrap();
            prop_assert!(c.is_attractive().0);
        }

        #[test]
        fn covering_check_agrees_with_brute_force(seed in any::<u64>(), perturb in 0usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = RateFamily::random_attractive(1, 1, 1.0, &mut rng).unwrap();
            prop_assert!(attractive_brute(&c));
            let mut t = c.tables()[0].clone();
            t[perturb] = rng.random::<f64>();
            let d = RateFamily::from_table(1, 1, t).unwrap();
            prop_assert_eq!(d.is_attractive().0, attractive_brute(&d));
        }

        #[test]
        fn epsilon_symmetric_and_triangle(s0 in any::<u64>(), s1 in any::<u64>(), s2 in any::<u64>()) {
            let mk = |s: u64| RateFamily::random_attractive(1, 1, 1.0, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            let (a, b, c) = (mk(s0), mk(s1), mk(s2));
            let ab = epsilon(&a, &b).unwrap();
            prop_assert_eq!(ab, epsilon(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert!(epsilon(&a, &c).unwrap() <= ab + epsilon(&b, &c).unwrap() + 1e-15);
        }
    }
}
