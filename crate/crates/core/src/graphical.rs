//! Poisson arrival streams with uniform marks and the monotone threshold
//! update rule that couples any number of chains on the same randomness.
//!
//! Each site draws its arrivals from its own ChaCha8 generator seeded by
//! `site_seed(stream_seed, absolute coordinates)`: exponential gap, then the
//! mark, for every arrival. Two streams with the same seed, window and λ
//! therefore agree on every site they share, whatever the surrounding box.

use std::io::{Read, Write};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::lattice::{Boundary, Geometry, LocalPattern, Spin};
pub use crate::lattice::SpinConfig;
use crate::rates::{RateFamily, SiteClass};
use crate::seeding::site_seed;

const MAGIC: &[u8; 8] = b"SPLTARR1";

/// One Poisson arrival: time, site index and uniform mark in `[0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arrival {
    pub time: f64,
    pub site: u32,
    pub mark: f64,
}

/// Space-time Poisson arrivals on a geometry over the window `(t_begin, t_end]`,
/// globally sorted by time.
#[derive(Clone, Debug)]
pub struct ArrivalStream {
    geom: Arc<Geometry>,
    seed: u64,
    lambda: f64,
    t_begin: f64,
    t_end: f64,
    arrivals: Vec<Arrival>,
}

/// Samples arrivals of rate `lambda` on every site of `geom` in `(t0, t1]`.
pub fn sample_arrivals(geom: Arc<Geometry>, lambda: f64, window: (f64, f64), seed: u64) -> Result<ArrivalStream> {
    let (t0, t1) = window;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Invalid(format!("arrival rate {lambda} must be positive")));
    }
    if !t0.is_finite() || !t1.is_finite() || t1 < t0 {
        return Err(Error::Invalid(format!("bad window ({t0}, {t1}]")));
    }
    let exp = Exp::new(lambda).map_err(|e| Error::Invalid(e.to_string()))?;
    let expected = (lambda * (t1 - t0) * geom.n_sites() as f64 * 1.05) as usize + 16;
    let mut arrivals = Vec::with_capacity(expected);
    for x in 0..geom.n_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(site_seed(seed, &geom.site(x).0));
        let mut t = t0;
        loop {
            let next = t + exp.sample(&mut rng);
            if next <= t {
                // gap below float resolution: redraw
                continue;
            }
            if next > t1 {
                break;
            }
            t = next;
            arrivals.push(Arrival {
                time: t,
                site: x as u32,
                mark: rng.random::<f64>(),
            });
        }
    }
    Ok(ArrivalStream::from_parts(geom, seed, lambda, (t0, t1), arrivals))
}

impl ArrivalStream {
    /// Sorts by `(time, site)` and separates exact cross-site ties by moving
    /// the later one to the next representable time.
    fn from_parts(geom: Arc<Geometry>, seed: u64, lambda: f64, window: (f64, f64), mut arrivals: Vec<Arrival>) -> Self {
        arrivals.sort_unstable_by(|a, b| a.time.total_cmp(&b.time).then(a.site.cmp(&b.site)));
        for i in 1..arrivals.len() {
            if arrivals[i].time <= arrivals[i - 1].time {
                arrivals[i].time = arrivals[i - 1].time.next_up();
            }
        }
        ArrivalStream {
            geom,
            seed,
            lambda,
            t_begin: window.0,
            t_end: window.1,
            arrivals,
        }
    }

    /// Stream from explicit arrivals; checks sites, marks and window.
    pub fn from_arrivals(geom: Arc<Geometry>, seed: u64, lambda: f64, window: (f64, f64), arrivals: Vec<Arrival>) -> Result<Self> {
        let (t0, t1) = window;
        if !(lambda > 0.0) || !(t0 <= t1) {
            return Err(Error::Invalid(format!("bad rate {lambda} or window ({t0}, {t1}]")));
        }
        for a in &arrivals {
            if a.site as usize >= geom.n_sites() || !(a.time > t0 && a.time <= t1) || !(0.0..1.0).contains(&a.mark) {
                return Err(Error::Invalid(format!("arrival {a:?} outside sites, window or mark range")));
            }
        }
        Ok(Self::from_parts(geom, seed, lambda, window, arrivals))
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }
    pub fn geometry_arc(&self) -> &Arc<Geometry> {
        &self.geom
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn window(&self) -> (f64, f64) {
        (self.t_begin, self.t_end)
    }
    pub fn arrivals(&self) -> &[Arrival] {
        &self.arrivals
    }
    pub fn len(&self) -> usize {
        self.arrivals.len()
    }
    pub fn is_empty(&self) -> bool {
        self.arrivals.is_empty()
    }

    /// Index of the first arrival with time `> t`.
    pub fn first_after(&self, t: f64) -> usize {
        self.arrivals.partition_point(|a| a.time <= t)
    }

    /// Arrivals with `t0 < time ≤ t1`.
    pub fn between(&self, t0: f64, t1: f64) -> &[Arrival] {
        let a = self.first_after(t0);
        let b = self.first_after(t1).max(a);
        &self.arrivals[a..b]
    }

    /// Arrivals at site `x` in time order.
    pub fn site_arrivals(&self, x: usize) -> Vec<Arrival> {
        self.arrivals.iter().filter(|a| a.site as usize == x).copied().collect()
    }

    /// The same data restricted to the window `(t0, t1]`.
    pub fn restrict_time(&self, t0: f64, t1: f64) -> ArrivalStream {
        ArrivalStream {
            geom: self.geom.clone(),
            seed: self.seed,
            lambda: self.lambda,
            t_begin: t0,
            t_end: t1,
            arrivals: self.between(t0, t1).to_vec(),
        }
    }

    /// Keeps only arrivals at sites accepted by `keep`.
    pub fn restrict_sites(&self, keep: impl Fn(usize) -> bool) -> ArrivalStream {
        ArrivalStream {
            geom: self.geom.clone(),
            seed: self.seed,
            lambda: self.lambda,
            t_begin: self.t_begin,
            t_end: self.t_end,
            arrivals: self.arrivals.iter().filter(|a| keep(a.site as usize)).copied().collect(),
        }
    }

    /// Binary layout, little endian: magic `SPLTARR1`; seed u64; λ, t_begin,
    /// t_end f64; dim u32; range u32; boundary u8 (0 periodic, 1 plus,
    /// 2 minus, 3 free); sides u64 × dim; origin i64 × dim; site count u64;
    /// then for every site in index order a u64 count followed by that many
    /// `(time f64, mark f64)` pairs.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let g = &self.geom;
        w.write_all(MAGIC)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        for v in [self.lambda, self.t_begin, self.t_end] {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_u32::<LittleEndian>(g.dim() as u32)?;
        w.write_u32::<LittleEndian>(g.range() as u32)?;
        w.write_u8(match g.boundary() {
            Boundary::Periodic => 0,
            Boundary::Plus => 1,
            Boundary::Minus => 2,
            Boundary::Free => 3,
        })?;
        for &s in g.sides() {
            w.write_u64::<LittleEndian>(s as u64)?;
        }
        for &o in g.origin() {
            w.write_i64::<LittleEndian>(o)?;
        }
        w.write_u64::<LittleEndian>(g.n_sites() as u64)?;
        let mut per_site: Vec<Vec<(f64, f64)>> = vec![Vec::new(); g.n_sites()];
        for a in &self.arrivals {
            per_site[a.site as usize].push((a.time, a.mark));
        }
        for list in per_site {
            w.write_u64::<LittleEndian>(list.len() as u64)?;
            for (t, u) in list {
                w.write_f64::<LittleEndian>(t)?;
                w.write_f64::<LittleEndian>(u)?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<ArrivalStream> {
        let bad = |m: &str| Error::Invalid(format!("arrival stream file: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("wrong magic"));
        }
        let seed = r.read_u64::<LittleEndian>()?;
        let lambda = r.read_f64::<LittleEndian>()?;
        let t0 = r.read_f64::<LittleEndian>()?;
        let t1 = r.read_f64::<LittleEndian>()?;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let range = r.read_u32::<LittleEndian>()? as usize;
        let boundary = match r.read_u8()? {
            0 => Boundary::Periodic,
            1 => Boundary::Plus,
            2 => Boundary::Minus,
            3 => Boundary::Free,
            _ => return Err(bad("unknown boundary code")),
        };
        if dim == 0 || dim > 8 {
            return Err(bad("dimension out of range"));
        }
        let sides = (0..dim)
            .map(|_| r.read_u64::<LittleEndian>().map(|s| s as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let origin = (0..dim)
            .map(|_| r.read_i64::<LittleEndian>())
            .collect::<std::io::Result<Vec<_>>>()?;
        let geom = Geometry::with_origin(sides, range, boundary, origin)?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        if n != geom.n_sites() {
            return Err(bad("site count does not match geometry"));
        }
        let mut arrivals = Vec::new();
        for x in 0..n {
            let count = r.read_u64::<LittleEndian>()?;
            for _ in 0..count {
                let time = r.read_f64::<LittleEndian>()?;
                let mark = r.read_f64::<LittleEndian>()?;
                arrivals.push(Arrival { time, site: x as u32, mark });
            }
        }
        ArrivalStream::from_arrivals(Arc::new(geom), seed, lambda, (t0, t1), arrivals)
    }
}

/// Update thresholds `v` per table variant and pattern for a fixed `λ`.
#[derive(Clone, Debug)]
pub struct Thresholds {
    class: SiteClass,
    values: Vec<Vec<f64>>,
}

impl Thresholds {
    pub fn new(c: &RateFamily, lambda: f64) -> Result<Self> {
        let required = 2.0 * c.sup_rate();
        if !(lambda > 0.0) || lambda < required {
            return Err(Error::LambdaTooSmall { lambda, required });
        }
        let len = c.pattern_len();
        let center_bit = 1u32 << (len / 2);
        let values = c
            .tables()
            .iter()
            .map(|t| {
                t.iter()
                    .enumerate()
                    .map(|(i, &rate)| {
                        if i as u32 & center_bit != 0 {
                            rate / lambda
                        } else {
                            1.0 - rate / lambda
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Thresholds {
            class: c.class(),
            values,
        })
    }

    #[inline]
    pub fn variant(&self, geom: &Geometry, x: usize) -> usize {
        match self.class {
            SiteClass::Uniform => 0,
            SiteClass::Parity => geom.parity(x) as usize,
        }
    }

    #[inline]
    pub fn value(&self, variant: usize, pattern: u32) -> f64 {
        self.values[variant][pattern as usize]
    }

    /// Smallest and largest threshold of a variant.
    pub fn bounds(&self, variant: usize) -> (f64, f64) {
        self.values[variant]
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn variants(&self) -> usize {
        self.values.len()
    }
}

/// New spin at an arrival: `+1` iff `mark ≥ v`, with `v = c/λ` when the
/// center is `+1` and `1 − c/λ` when it is `−1`.
pub fn update_value(pattern: LocalPattern, mark: f64, c: &RateFamily, variant: usize, lambda: f64) -> Result<Spin> {
    let required = 2.0 * c.sup_rate();
    if !(lambda > 0.0) || lambda < required {
        return Err(Error::LambdaTooSmall { lambda, required });
    }
    let rate = c.rate(variant, pattern.index);
    let v = if pattern.center() > 0 { rate / lambda } else { 1.0 - rate / lambda };
    Ok(if mark >= v { 1 } else { -1 })
}

/// One chain driven by the threshold rule.
#[derive(Clone, Debug)]
pub struct Chain<'g> {
    geom: &'g Geometry,
    thresholds: Thresholds,
    config: SpinConfig,
}

impl<'g> Chain<'g> {
    pub fn new(geom: &'g Geometry, c: &RateFamily, lambda: f64, initial: SpinConfig) -> Result<Self> {
        c.validate_for(geom)?;
        if initial.len() != geom.n_sites() {
            return Err(Error::GeometryMismatch(format!(
                "initial config has {} sites, geometry {}",
                initial.len(),
                geom.n_sites()
            )));
        }
        Ok(Chain {
            geom,
            thresholds: Thresholds::new(c, lambda)?,
            config: initial,
        })
    }

    /// Applies one arrival; returns `(old, new)` spin at its site.
    #[inline]
    pub fn apply(&mut self, a: &Arrival) -> (Spin, Spin) {
        let x = a.site as usize;
        let pattern = self.geom.pattern_index(&self.config, x);
        let v = self.thresholds.value(self.thresholds.variant(self.geom, x), pattern);
        let old = self.config.get(x);
        let new = if a.mark >= v { 1 } else { -1 };
        if new != old {
            self.config.set(x, new);
        }
        (old, new)
    }

    pub fn run(&mut self, arrivals: &[Arrival]) {
        for a in arrivals {
            self.apply(a);
        }
    }

    pub fn config(&self) -> &SpinConfig {
        &self.config
    }

    pub fn into_config(self) -> SpinConfig {
        self.config
    }
}

/// Observables that can be sampled along a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observable {
    /// Mean spin `Σσ / N`.
    Magnetization,
    /// Spin at one site index.
    Spin(usize),
}

impl Observable {
    pub fn name(&self) -> String {
        match self {
            Observable::Magnetization => "magnetization".into(),
            Observable::Spin(x) => format!("spin_{x}"),
        }
    }

    pub fn eval(&self, config: &SpinConfig) -> f64 {
        match *self {
            Observable::Magnetization => config.magnetization() as f64 / config.len() as f64,
            Observable::Spin(x) => f64::from(config.get(x)),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RecordOptions<'a> {
    pub log_events: bool,
    /// Sorted sampling times; each sample sees every arrival with time ≤ it.
    pub sample_times: Vec<f64>,
    pub observables: Vec<Observable>,
    /// Flags perturbation arrivals in the event log.
    pub perturbation: Option<&'a PerturbationDetector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub time: f64,
    pub site: u32,
    pub old: Spin,
    pub new: Spin,
    pub mark: f64,
    pub perturbation: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub observable: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub events: Vec<Event>,
    pub samples: Vec<Sample>,
}

impl TrajectoryRecord {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "time,observable,value")?;
        for s in &self.samples {
            writeln!(w, "{},{},{}", s.time, s.observable, s.value)?;
        }
        Ok(())
    }
}

/// Runs `c` from `initial` through every arrival of `stream`.
pub fn evolve(
    initial: SpinConfig,
    c: &RateFamily,
    stream: &ArrivalStream,
    record: &RecordOptions,
) -> Result<(SpinConfig, TrajectoryRecord)> {
    let geom = stream.geometry();
    let mut chain = Chain::new(geom, c, stream.lambda(), initial)?;
    let mut rec = TrajectoryRecord::default();
    let mut times = record.sample_times.iter().copied().peekable();
    let sample = |rec: &mut TrajectoryRecord, t: f64, cfg: &SpinConfig| {
        for o in &record.observables {
            rec.samples.push(Sample {
                time: t,
                observable: o.name(),
                value: o.eval(cfg),
            });
        }
    };
    for a in stream.arrivals() {
        while let Some(&t) = times.peek() {
            if t >= a.time {
                break;
            }
            sample(&mut rec, t, chain.config());
            times.next();
        }
        let (old, new) = chain.apply(a);
        if record.log_events {
            let perturbation = record
                .perturbation
                .is_some_and(|d| d.is_perturbation(geom, a.site as usize, a.mark));
            rec.events.push(Event {
                time: a.time,
                site: a.site,
                old,
                new,
                mark: a.mark,
                perturbation,
            });
        }
    }
    for t in times {
        sample(&mut rec, t, chain.config());
    }
    Ok((chain.into_config(), rec))
}

/// Runs several chains on the same arrivals.
pub fn coupled_evolve(chains: Vec<(SpinConfig, &RateFamily)>, stream: &ArrivalStream) -> Result<Vec<SpinConfig>> {
    let geom = stream.geometry();
    let mut runners = chains
        .into_iter()
        .map(|(init, c)| Chain::new(geom, c, stream.lambda(), init))
        .collect::<Result<Vec<_>>>()?;
    for a in stream.arrivals() {
        for r in &mut runners {
            r.apply(a);
        }
    }
    Ok(runners.into_iter().map(Chain::into_config).collect())
}

/// Marks that separate the thresholds of two families for some pattern,
/// stored per site class as disjoint open intervals.
#[derive(Clone, Debug)]
pub struct PerturbationDetector {
    class: SiteClass,
    intervals: Vec<Vec<(f64, f64)>>,
}

impl PerturbationDetector {
    pub fn new(c0: &RateFamily, c1: &RateFamily, lambda: f64) -> Result<Self> {
        let range = c0.range().max(c1.range());
        let (c0, c1) = (c0.padded(range)?, c1.padded(range)?);
        let t0 = Thresholds::new(&c0, lambda)?;
        let t1 = Thresholds::new(&c1, lambda)?;
        let parity = c0.class() == SiteClass::Parity || c1.class() == SiteClass::Parity;
        let classes = if parity { 2 } else { 1 };
        let pick = |t: &Thresholds, k: usize| if t.variants() == 1 { 0 } else { k };
        let n = 1u32 << c0.pattern_len();
        let intervals = (0..classes)
            .map(|k| {
                let mut iv: Vec<(f64, f64)> = (0..n)
                    .filter_map(|p| {
                        let (a, b) = (t0.value(pick(&t0, k), p), t1.value(pick(&t1, k), p));
                        (a != b).then(|| (a.min(b), a.max(b)))
                    })
                    .collect();
                iv.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut merged: Vec<(f64, f64)> = Vec::new();
                for (a, b) in iv {
                    match merged.last_mut() {
                        Some(last) if a < last.1 => last.1 = last.1.max(b),
                        _ => merged.push((a, b)),
                    }
                }
                merged
            })
            .collect();
        Ok(PerturbationDetector {
            class: if parity { SiteClass::Parity } else { SiteClass::Uniform },
            intervals,
        })
    }

    fn class_index(&self, geom: &Geometry, x: usize) -> usize {
        match self.class {
            SiteClass::Uniform => 0,
            SiteClass::Parity => geom.parity(x) as usize,
        }
    }

    /// Whether a mark at site `x` lies strictly between `v⁰(σ)` and `v¹(σ)`
    /// for some pattern `σ`.
    pub fn is_perturbation(&self, geom: &Geometry, x: usize, mark: f64) -> bool {
        let iv = &self.intervals[self.class_index(geom, x)];
        let k = iv.partition_point(|&(a, _)| a < mark);
        k > 0 && mark < iv[k - 1].1
    }

    /// Lebesgue measure of the perturbation marks of a site class.
    pub fn measure(&self, class: usize) -> f64 {
        self.intervals[class].iter().map(|(a, b)| b - a).sum()
    }

    pub fn classes(&self) -> usize {
        self.intervals.len()
    }

    /// True when no mark can ever separate the families.
    pub fn is_trivial(&self) -> bool {
        self.intervals.iter().all(Vec::is_empty)
    }
}

/// Exhaustive-scan definition of a perturbation arrival for table variant
/// `variant` of both families.
pub fn is_perturbation_arrival(mark: f64, c0: &RateFamily, c1: &RateFamily, variant: usize, lambda: f64) -> Result<bool> {
    let t0 = Thresholds::new(c0, lambda)?;
    let t1 = Thresholds::new(c1, lambda)?;
    let v0 = variant.min(t0.variants() - 1);
    let v1 = variant.min(t1.variants() - 1);
    Ok((0..1u32 << c0.pattern_len()).any(|p| (mark - t0.value(v0, p)) * (mark - t1.value(v1, p)) < 0.0))
}

/// Outcome of a monotonicity check.
#[derive(Clone, Debug, PartialEq)]
pub struct MonotoneCheck {
    pub ok: bool,
    /// First `(time, site)` where the order broke.
    pub violation: Option<(f64, usize)>,
    /// Arrivals processed (each updates both chains).
    pub updates: usize,
}

/// Runs `upper` and `lower` on the stream, checking `upper ≥ lower` after
/// every arrival.
pub fn check_monotone(c: &RateFamily, stream: &ArrivalStream, upper: SpinConfig, lower: SpinConfig) -> Result<MonotoneCheck> {
    if !upper.dominates(&lower) {
        return Err(Error::Invalid("initial pair is not ordered".into()));
    }
    let geom = stream.geometry();
    let mut hi = Chain::new(geom, c, stream.lambda(), upper)?;
    let mut lo = Chain::new(geom, c, stream.lambda(), lower)?;
    for (i, a) in stream.arrivals().iter().enumerate() {
        let (_, sh) = hi.apply(a);
        let (_, sl) = lo.apply(a);
        if sh < sl {
            return Ok(MonotoneCheck {
                ok: false,
                violation: Some((a.time, a.site as usize)),
                updates: i + 1,
            });
        }
    }
    Ok(MonotoneCheck {
        ok: true,
        violation: None,
        updates: stream.len(),
    })
}

/// Runs the all-plus and all-minus chains over the arrivals with
/// `s < time ≤ t` and reports whether they disagree at `x` at time `t`.
/// Stops early once the chains coalesce.
pub fn sandwich_pair(c: &RateFamily, stream: &ArrivalStream, x: usize, s: f64, t: f64) -> Result<bool> {
    let geom = stream.geometry();
    let n = geom.n_sites();
    let mut plus = Chain::new(geom, c, stream.lambda(), SpinConfig::all_plus(n))?;
    let mut minus = Chain::new(geom, c, stream.lambda(), SpinConfig::all_minus(n))?;
    let mut differ = n;
    for a in stream.between(s, t) {
        let site = a.site as usize;
        let before = plus.config().get(site) != minus.config().get(site);
        let (_, p) = plus.apply(a);
        let (_, m) = minus.apply(a);
        let after = p != m;
        match (before, after) {
            (true, false) => differ -= 1,
            (false, true) => differ += 1,
            _ => {}
        }
        if differ == 0 {
            return Ok(false);
        }
    }
    Ok(plus.config().get(x) != minus.config().get(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::{glauber_rates, uniformization_rate, CouplingKernel};
    use crate::stats::mean_stderr;
    use proptest::prelude::*;

    fn torus(dim: usize, side: usize) -> Arc<Geometry> {
        Arc::new(Geometry::cube(dim, side, 1, Boundary::Periodic).unwrap())
    }

    #[test]
    fn update_rule_examples() {
        let c = RateFamily::constant(1, 1, 1.0).unwrap();
        let plus = LocalPattern::from_spins(&[1, 1, 1]);
        let minus = LocalPattern::from_spins(&[1, -1, 1]);
        assert_eq!(update_value(plus, 0.3, &c, 0, 2.0).unwrap(), -1);
        assert_eq!(update_value(minus, 0.7, &c, 0, 2.0).unwrap(), 1);
        let frozen = RateFamily::constant(1, 1, 0.0).unwrap();
        for u in [0.0, 0.5, 0.999] {
            assert_eq!(update_value(plus, u, &frozen, 0, 1.0).unwrap(), 1);
        }
        assert!(matches!(update_value(plus, 0.5, &c, 0, 1.5), Err(Error::LambdaTooSmall { .. })));
    }

    #[test]
    fn zero_window_is_empty() {
        let s = sample_arrivals(torus(1, 4), 3.0, (1.0, 1.0), 9).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn arrivals_sorted_and_strict_per_site() {
        let s = sample_arrivals(torus(2, 6), 5.0, (0.0, 3.0), 11).unwrap();
        assert!(s.arrivals().windows(2).all(|w| w[0].time < w[1].time));
        assert!(s.arrivals().iter().all(|a| a.time > 0.0 && a.time <= 3.0 && (0.0..1.0).contains(&a.mark)));
    }

    #[test]
    fn poisson_count_mean() {
        let g = torus(1, 1);
        let (lambda, t) = (2.5, 4.0);
        let counts: Vec<f64> = (0..10_000)
            .map(|s| sample_arrivals(g.clone(), lambda, (0.0, t), s).unwrap().len() as f64)
            .collect();
        let (m, se) = mean_stderr(&counts);
        assert!((m - lambda * t).abs() < 3.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn shared_sites_agree_across_geometries() {
        let small = Arc::new(Geometry::with_origin(vec![3, 3], 1, Boundary::Free, vec![2, 2]).unwrap());
        let big = torus(2, 8);
        let a = sample_arrivals(small.clone(), 4.0, (0.0, 2.0), 5).unwrap();
        let b = sample_arrivals(big.clone(), 4.0, (0.0, 2.0), 5).unwrap();
        for x in 0..small.n_sites() {
            let y = big.index_of(&small.site(x)).unwrap();
            let pa: Vec<(f64, f64)> = a.site_arrivals(x).iter().map(|a| (a.time, a.mark)).collect();
            let pb: Vec<(f64, f64)> = b.site_arrivals(y).iter().map(|a| (a.time, a.mark)).collect();
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn binary_round_trip_and_determinism() {
        let g = torus(2, 5);
        let s = sample_arrivals(g.clone(), 3.0, (0.5, 2.0), 77).unwrap();
        let mut a = Vec::new();
        s.write_binary(&mut a).unwrap();
        let mut b = Vec::new();
        sample_arrivals(g, 3.0, (0.5, 2.0), 77).unwrap().write_binary(&mut b).unwrap();
        assert_eq!(a, b);
        let back = ArrivalStream::read_binary(&a[..]).unwrap();
        assert_eq!(back.arrivals(), s.arrivals());
        assert_eq!(back.window(), s.window());
        assert_eq!(back.geometry(), s.geometry());
        assert!(ArrivalStream::read_binary(&b"garbage!"[..]).is_err());
    }

    #[test]
    fn empty_stream_keeps_initial() {
        let g = torus(1, 4);
        let s = sample_arrivals(g, 2.0, (0.0, 0.0), 1).unwrap();
        let c = RateFamily::constant(1, 1, 1.0).unwrap();
        let init = SpinConfig::from_spins(&[1, -1, -1, 1]);
        let (fin, _) = evolve(init.clone(), &c, &s, &RecordOptions::default()).unwrap();
        assert_eq!(fin, init);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let s = sample_arrivals(torus(1, 4), 2.0, (0.0, 1.0), 1).unwrap();
        let c = RateFamily::constant(1, 1, 1.0).unwrap();
        assert!(matches!(
            evolve(SpinConfig::all_plus(5), &c, &s, &RecordOptions::default()),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn coupled_matches_separate_runs() {
        let g = torus(2, 6);
        let k = CouplingKernel::nearest_neighbor(2, 1.0);
        let c0 = glauber_rates(&k, 0.1, 0.4, &g).unwrap();
        let c1 = glauber_rates(&k, -0.2, 0.3, &g).unwrap();
        let lambda = uniformization_rate(&[&c0, &c1]);
        let s = sample_arrivals(g.clone(), lambda, (0.0, 3.0), 4).unwrap();
        let init = SpinConfig::from_spins(&(0..36).map(|i| if i % 3 == 0 { 1 } else { -1 }).collect::<Vec<_>>());
        let both = coupled_evolve(vec![(init.clone(), &c0), (init.clone(), &c1)], &s).unwrap();
        assert_eq!(both[0], evolve(init.clone(), &c0, &s, &RecordOptions::default()).unwrap().0);
        assert_eq!(both[1], evolve(init, &c1, &s, &RecordOptions::default()).unwrap().0);
    }

    #[test]
    fn record_samples_and_events() {
        let g = torus(1, 6);
        let c = RateFamily::constant(1, 1, 1.0).unwrap();
        let s = sample_arrivals(g, 2.0, (0.0, 2.0), 8).unwrap();
        let opts = RecordOptions {
            log_events: true,
            sample_times: vec![0.0, 1.0, 2.0],
            observables: vec![Observable::Magnetization, Observable::Spin(0)],
            perturbation: None,
        };
        let (fin, rec) = evolve(SpinConfig::all_plus(6), &c, &s, &opts).unwrap();
        assert_eq!(rec.events.len(), s.len());
        assert_eq!(rec.samples.len(), 6);
        assert_eq!(rec.samples[0].value, 1.0);
        assert_eq!(rec.samples[4].value, fin.magnetization() as f64 / 6.0);
        let mut out = Vec::new();
        rec.write_csv(&mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("time,observable,value\n0,magnetization,1\n"));
    }

    #[test]
    fn perturbation_detector_examples() {
        // v⁰ = 0.40, v¹ = 0.45 on one pattern with center +1 (v = c/λ, λ = 2)
        let len = 3;
        let p = LocalPattern::from_spins(&[1, 1, -1]).index as usize;
        let mut t0 = vec![0.2; 1 << len];
        let mut t1 = t0.clone();
        t0[p] = 0.8;
        t1[p] = 0.9;
        let c0 = RateFamily::from_table(1, 1, t0).unwrap();
        let c1 = RateFamily::from_table(1, 1, t1).unwrap();
        let g = Geometry::cube(1, 3, 1, Boundary::Periodic).unwrap();
        let d = PerturbationDetector::new(&c0, &c1, 2.0).unwrap();
        assert!(d.is_perturbation(&g, 0, 0.42));
        assert!(!d.is_perturbation(&g, 0, 0.40));
        assert!(!d.is_perturbation(&g, 0, 0.45));
        assert!(is_perturbation_arrival(0.42, &c0, &c1, 0, 2.0).unwrap());
        assert!((d.measure(0) - 0.05).abs() < 1e-15);
        let same = PerturbationDetector::new(&c0, &c0, 2.0).unwrap();
        assert!(same.is_trivial());
    }

    #[test]
    fn monotone_flags_non_attractive_table() {
        let g = torus(1, 8);
        let k = CouplingKernel::new(1, vec![(vec![1], -1.5), (vec![-1], -1.5)]).unwrap();
        let c = crate::rates::glauber_general(&k, 0.0, 1.0, 1).unwrap();
        let lambda = uniformization_rate(&[&c]);
        let found = (0..50).any(|seed| {
            let s = sample_arrivals(g.clone(), lambda, (0.0, 20.0), seed).unwrap();
            let init_hi = SpinConfig::all_plus(8);
            let init_lo = SpinConfig::from_spins(&[1, -1, 1, 1, -1, 1, 1, -1]);
            !check_monotone(&c, &s, init_hi, init_lo).unwrap().ok
        });
        assert!(found);
    }

    #[test]
    fn sandwich_pair_constant_rate_single_site() {
        // any arrival resolves the site, so disagreement ⇔ no arrival in (s, t]
        let g = torus(1, 1);
        let c = RateFamily::constant(1, 1, 1.0).unwrap();
        for seed in 0..50 {
            let s = sample_arrivals(g.clone(), 2.0, (0.0, 1.0), seed).unwrap();
            assert_eq!(sandwich_pair(&c, &s, 0, 0.0, 1.0).unwrap(), s.is_empty());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn funnel_order_preserved(seed in any::<u64>(), beta in 0.05..1.0f64, h in -1.0..1.0f64) {
            let g = torus(2, 6);
            let c = glauber_rates(&CouplingKernel::nearest_neighbor(2, 1.0), h, beta, &g).unwrap();
            let s = sample_arrivals(g.clone(), uniformization_rate(&[&c]), (0.0, 2.0), seed).unwrap();
            let mid = SpinConfig::from_spins(&(0..36).map(|i| if (i * 7 + seed as usize) % 3 == 0 { 1 } else { -1 }).collect::<Vec<_>>());
            let mut chains = [
                Chain::new(&g, &c, s.lambda(), SpinConfig::all_plus(36)).unwrap(),
                Chain::new(&g, &c, s.lambda(), mid).unwrap(),
                Chain::new(&g, &c, s.lambda(), SpinConfig::all_minus(36)).unwrap(),
            ];
            for a in s.arrivals() {
                for ch in &mut chains {
                    ch.apply(a);
                }
                prop_assert!(chains[0].config().dominates(chains[1].config()));
                prop_assert!(chains[1].config().dominates(chains[2].config()));
            }
        }

        #[test]
        fn evolve_is_deterministic(seed in any::<u64>()) {
            let g = torus(1, 10);
            let c = glauber_rates(&CouplingKernel::nearest_neighbor(1, 1.0), 0.2, 0.6, &g).unwrap();
            let s = sample_arrivals(g, uniformization_rate(&[&c]), (0.0, 3.0), seed).unwrap();
            let a = evolve(SpinConfig::all_minus(10), &c, &s, &RecordOptions::default()).unwrap().0;
            let b = evolve(SpinConfig::all_minus(10), &c, &s, &RecordOptions::default()).unwrap().0;
            prop_assert_eq!(a, b);
        }
    }
}
