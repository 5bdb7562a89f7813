//! Space-time box grid, the three bad-box events and bad-box statistics.
//!
//! Box `n = (k, l)` covers sites `Mk + {0,…,M−1}^d` and times
//! `(L·l, L·(l+1)]`. Its extended box has the same time extent and sites
//! `Mk + {−M,…,2M−1}^d`. Two boxes whose extended boxes are disjoint, i.e.
//! `|Δk|∞ ≥ 3` or `Δl ≠ 0`, depend on disjoint parts of the graphical
//! construction and are independent.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphical::{sample_arrivals, ArrivalStream, Chain, PerturbationDetector};
use crate::influence::{backward_dependence, lightray_reach_set, overapprox_survives, DependenceMethod, DependenceOptions};
use crate::lattice::{Boundary, Geometry, Site, SpinConfig};
use crate::rates::{epsilon, uniformization_rate, RateFamily};
use crate::seeding::replica_seed;
use crate::stats::binomial_stderr;

/// How the spatial box side follows from the time side `L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum SideRule {
    /// `M = 2r·L`.
    Linear,
    /// `M = ⌈c·r·L⌉ + 2`, rounded up to even so checkerboard classes tile
    /// the environment torus.
    Lightcone { c: f64 },
}

impl SideRule {
    pub fn side(self, range: usize, l_box: usize) -> usize {
        match self {
            SideRule::Linear => 2 * range * l_box,
            SideRule::Lightcone { c } => {
                let m = (c * range as f64 * l_box as f64).ceil() as usize + 2;
                m + m % 2
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxGrid {
    pub dim: usize,
    pub range: usize,
    pub n_scale: f64,
    pub tau0: f64,
    /// Time side `⌈N τ₀⌉`.
    pub l_box: usize,
    /// Spatial side.
    pub m: usize,
}

impl BoxGrid {
    pub fn new(dim: usize, range: usize, n_scale: f64, tau0: f64, rule: SideRule) -> Result<Self> {
        if !(n_scale > 0.0 && tau0 > 0.0 && tau0.is_finite()) {
            return Err(Error::Invalid(format!("need N > 0 and finite τ₀ > 0, got N={n_scale}, τ₀={tau0}")));
        }
        if dim == 0 || range == 0 {
            return Err(Error::Invalid("dimension and range must be positive".into()));
        }
        let l_box = (n_scale * tau0).ceil() as usize;
        Ok(BoxGrid {
            dim,
            range,
            n_scale,
            tau0,
            l_box,
            m: rule.side(range, l_box),
        })
    }

    pub fn time_extent(&self, l: i64) -> (f64, f64) {
        let lb = self.l_box as f64;
        (lb * l as f64, lb * (l + 1) as f64)
    }

    /// Sites of the extended box of `k` with, per site, whether it lies in
    /// the box itself and whether it has a neighbor outside the extended box.
    fn layout(&self, k: &[i64], geom: &Geometry) -> Result<Vec<(usize, bool, bool)>> {
        if k.len() != self.dim || geom.dim() != self.dim {
            return Err(Error::GeometryMismatch("box index and geometry dimension differ".into()));
        }
        let side = 3 * self.m;
        if geom.boundary() == Boundary::Periodic && geom.sides().iter().any(|&s| s < side) {
            return Err(Error::Coverage(format!("torus sides {:?} smaller than extended box side {side}", geom.sides())));
        }
        let (m, r) = (self.m as i64, self.range as i64);
        let total = side.pow(self.dim as u32);
        let mut out = Vec::with_capacity(total);
        for i in 0..total {
            let mut rem = i;
            let mut local = vec![0i64; self.dim];
            for a in (0..self.dim).rev() {
                local[a] = (rem % side) as i64;
                rem /= side;
            }
            let abs: Vec<i64> = local.iter().zip(k).map(|(&u, &kk)| m * kk - m + u).collect();
            let idx = geom
                .index_of(&Site(abs.clone()))
                .ok_or_else(|| Error::Coverage(format!("site {abs:?} of the extended box is outside the geometry")))?;
            let inner = local.iter().all(|&u| (m..2 * m).contains(&u));
            let band = local.iter().any(|&u| u < r || u >= 3 * m - r);
            out.push((idx, inner, band));
        }
        Ok(out)
    }
}

/// Which bad-box events occurred.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxEvents {
    /// A perturbation arrival in the extended box.
    pub event1: bool,
    /// A lightray from the box reaches the boundary of the extended box.
    pub event2: bool,
    /// An unperturbed dependence set seeded at the top of the box survives
    /// to its bottom.
    pub event3: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Good,
    BadEvent1,
    BadEvent2,
    BadEvent3,
}

impl BoxEvents {
    pub fn verdict(&self) -> Verdict {
        if self.event1 {
            Verdict::BadEvent1
        } else if self.event2 {
            Verdict::BadEvent2
        } else if self.event3 {
            Verdict::BadEvent3
        } else {
            Verdict::Good
        }
    }

    pub fn is_bad(&self) -> bool {
        self.event1 || self.event2 || self.event3
    }
}

/// Classifies box `(k, l)` from a stream whose geometry contains its
/// extended box and whose window covers its time extent. Event 3 uses the
/// unperturbed family `c0` and the chosen dependence method; the sandwich
/// method runs the ± chains on the extended box only.
pub fn classify_box(
    k: &[i64],
    l: i64,
    stream: &ArrivalStream,
    c0: &RateFamily,
    c1: &RateFamily,
    grid: &BoxGrid,
    method: DependenceMethod,
) -> Result<BoxEvents> {
    let geom = stream.geometry();
    let (bottom, top) = grid.time_extent(l);
    let (w0, w1) = stream.window();
    if w0 > bottom || w1 < top {
        return Err(Error::Coverage(format!("box times ({bottom}, {top}] outside stream window ({w0}, {w1}]")));
    }
    let layout = grid.layout(k, geom)?;
    let mut in_ext = vec![false; geom.n_sites()];
    let mut band = vec![false; geom.n_sites()];
    for &(idx, _, b) in &layout {
        in_ext[idx] = true;
        band[idx] = b;
    }
    let inner: Vec<usize> = layout.iter().filter(|p| p.1).map(|p| p.0).collect();

    let detector = PerturbationDetector::new(c0, c1, stream.lambda())?;
    let event1 = stream
        .between(bottom, top)
        .iter()
        .any(|a| in_ext[a.site as usize] && detector.is_perturbation(geom, a.site as usize, a.mark));

    let (_, event2) = lightray_reach_set(&inner, top, stream, bottom, |y| band[y])?;

    let local = stream.restrict_time(bottom, top).restrict_sites(|y| in_ext[y]);
    let event3 = match method {
        DependenceMethod::Overapprox => overapprox_survives(&inner, top, bottom, &local, c0)?,
        DependenceMethod::Exact => {
            let opts = DependenceOptions {
                floor: Some(bottom),
                ..DependenceOptions::default()
            };
            let mut any = false;
            for &x in &inner {
                if backward_dependence(x, top, &local, c0, method, opts)?.is_nonempty(bottom) {
                    any = true;
                    break;
                }
            }
            any
        }
        DependenceMethod::Sandwich => region_disagreement(&local, c0, &layout)?,
    };
    Ok(BoxEvents { event1, event2, event3 })
}

/// ± chains over the arrivals of a stream already clipped to the extended
/// box; whether they disagree somewhere in the box at the end.
fn region_disagreement(local: &ArrivalStream, c: &RateFamily, layout: &[(usize, bool, bool)]) -> Result<bool> {
    if !c.is_attractive().0 {
        return Err(Error::NotAttractive("event 3 by sandwich needs attractive rates".into()));
    }
    let geom = local.geometry();
    let n = geom.n_sites();
    let mut plus = Chain::new(geom, c, local.lambda(), SpinConfig::all_plus(n))?;
    let mut minus = Chain::new(geom, c, local.lambda(), SpinConfig::all_minus(n))?;
    let mut differ = layout.len();
    for a in local.arrivals() {
        let site = a.site as usize;
        let before = plus.config().get(site) != minus.config().get(site);
        let (_, p) = plus.apply(a);
        let (_, q) = minus.apply(a);
        match (before, p != q) {
            (true, false) => differ -= 1,
            (false, true) => differ += 1,
            _ => {}
        }
        if differ == 0 {
            return Ok(false);
        }
    }
    Ok(layout.iter().any(|&(idx, inner, _)| inner && plus.config().get(idx) != minus.config().get(idx)))
}

/// Torus carrying exactly one extended box, box index `k = 0`, absolute
/// coordinates `{−M,…,2M−1}^d`.
pub fn environment_geometry(grid: &BoxGrid) -> Result<Geometry> {
    let m = grid.m as i64;
    Geometry::with_origin(vec![3 * grid.m; grid.dim], grid.range, Boundary::Periodic, vec![-m; grid.dim])
}

/// Events of one i.i.d. box environment.
pub fn environment_events(
    grid: &BoxGrid,
    geom: &Arc<Geometry>,
    c0: &RateFamily,
    c1: &RateFamily,
    method: DependenceMethod,
    seed: u64,
) -> Result<BoxEvents> {
    let lambda = uniformization_rate(&[c0, c1]);
    let stream = sample_arrivals(geom.clone(), lambda, grid.time_extent(0), seed)?;
    classify_box(&vec![0; grid.dim], 0, &stream, c0, c1, grid, method)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BadBoxPoint {
    pub n_scale: f64,
    pub m: usize,
    pub l_box: usize,
    pub epsilon: f64,
    pub p_bad: f64,
    pub stderr: f64,
    pub event1_frac: f64,
    pub event2_frac: f64,
    pub event3_frac: f64,
    pub replicas: usize,
    pub method: DependenceMethod,
}

/// Bad-box frequency over i.i.d. environments for one grid.
pub fn bad_probability(
    grid: &BoxGrid,
    c0: &RateFamily,
    c1: &RateFamily,
    replicas: usize,
    method: DependenceMethod,
    seed: u64,
) -> Result<BadBoxPoint> {
    let geom = Arc::new(environment_geometry(grid)?);
    c0.validate_for(&geom)?;
    c1.validate_for(&geom)?;
    let tag = format!("badbox/{}/{}", grid.l_box, grid.m);
    let events = (0..replicas)
        .into_par_iter()
        .map(|i| environment_events(grid, &geom, c0, c1, method, replica_seed(seed, &tag, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let frac = |f: fn(&BoxEvents) -> bool| events.iter().filter(|e| f(e)).count() as f64 / replicas.max(1) as f64;
    let p = frac(BoxEvents::is_bad);
    Ok(BadBoxPoint {
        n_scale: grid.n_scale,
        m: grid.m,
        l_box: grid.l_box,
        epsilon: epsilon(c0, c1)?,
        p_bad: p,
        stderr: binomial_stderr(p, replicas),
        event1_frac: frac(|e| e.event1),
        event2_frac: frac(|e| e.event2),
        event3_frac: frac(|e| e.event3),
        replicas,
        method,
    })
}

/// Scan over the scale `N`.
#[allow(clippy::too_many_arguments)]
pub fn bad_box_scan(
    dim: usize,
    n_scales: &[f64],
    tau0: f64,
    rule: SideRule,
    c0: &RateFamily,
    c1: &RateFamily,
    replicas: usize,
    method: DependenceMethod,
    seed: u64,
) -> Result<Vec<BadBoxPoint>> {
    let range = c0.range().max(c1.range());
    n_scales
        .iter()
        .map(|&n| bad_probability(&BoxGrid::new(dim, range, n, tau0, rule)?, c0, c1, replicas, method, seed))
        .collect()
}

/// Expected event-1 probability `1 − exp(−λ q̄ |B̃| L)` with `q̄` the mean
/// perturbation-mark measure over site classes.
pub fn event1_prediction(grid: &BoxGrid, c0: &RateFamily, c1: &RateFamily) -> Result<f64> {
    let lambda = uniformization_rate(&[c0, c1]);
    let det = PerturbationDetector::new(c0, c1, lambda)?;
    let q = (0..det.classes()).map(|k| det.measure(k)).sum::<f64>() / det.classes() as f64;
    let vol = (3 * grid.m).pow(grid.dim as u32) as f64 * grid.l_box as f64;
    Ok(1.0 - (-lambda * q * vol).exp())
}

/// Verdicts of a `boxes^d × slabs` block of boxes on one torus stream,
/// indexed `[slab][box]` with boxes in row-major order.
pub fn box_field(
    grid: &BoxGrid,
    boxes: usize,
    slabs: usize,
    c0: &RateFamily,
    c1: &RateFamily,
    method: DependenceMethod,
    seed: u64,
) -> Result<Vec<Vec<BoxEvents>>> {
    if boxes < 3 {
        return Err(Error::Invalid("need at least 3 boxes per axis so extended boxes do not overlap themselves".into()));
    }
    let geom = Arc::new(Geometry::cube(grid.dim, boxes * grid.m, grid.range, Boundary::Periodic)?);
    let lambda = uniformization_rate(&[c0, c1]);
    let stream = sample_arrivals(geom, lambda, (0.0, (slabs * grid.l_box) as f64), seed)?;
    let count = boxes.pow(grid.dim as u32);
    (0..slabs)
        .map(|l| {
            (0..count)
                .map(|i| {
                    let mut rem = i;
                    let mut k = vec![0i64; grid.dim];
                    for a in (0..grid.dim).rev() {
                        k[a] = (rem % boxes) as i64;
                        rem /= boxes;
                    }
                    classify_box(&k, l as i64, &stream, c0, c1, grid, method)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphical::Arrival;
    use crate::rates::{checkerboard_perturbation, glauber_rates, CouplingKernel};

    fn ising(dim: usize, beta: f64) -> RateFamily {
        let g = Geometry::cube(dim, 6, 1, Boundary::Periodic).unwrap();
        glauber_rates(&CouplingKernel::nearest_neighbor(dim, 1.0), 0.0, beta, &g).unwrap()
    }

    fn grid_1d(l_box: usize, m: usize) -> BoxGrid {
        BoxGrid {
            dim: 1,
            range: 1,
            n_scale: 1.0,
            tau0: l_box as f64,
            l_box,
            m,
        }
    }

    #[test]
    fn grid_sides() {
        let g = BoxGrid::new(2, 1, 4.0, 0.6, SideRule::Linear).unwrap();
        assert_eq!((g.l_box, g.m), (3, 6));
        assert_eq!(SideRule::Lightcone { c: 2.5 }.side(1, 3), 10);
        assert_eq!(SideRule::Lightcone { c: 2.0 }.side(1, 3), 8);
        assert!(BoxGrid::new(1, 1, 1.0, f64::INFINITY, SideRule::Linear).is_err());
    }

    #[test]
    fn quiet_box_is_bad_by_event3() {
        let grid = grid_1d(2, 4);
        let geom = Arc::new(environment_geometry(&grid).unwrap());
        let c = ising(1, 0.3);
        let lambda = uniformization_rate(&[&c]);
        let empty = sample_arrivals(geom, lambda, (0.0, 2.0), 1).unwrap().restrict_sites(|_| false);
        for m in [DependenceMethod::Sandwich, DependenceMethod::Overapprox, DependenceMethod::Exact] {
            let e = classify_box(&[0], 0, &empty, &c, &c, &grid, m).unwrap();
            assert_eq!(e, BoxEvents { event1: false, event2: false, event3: true });
            assert_eq!(e.verdict(), Verdict::BadEvent3);
        }
    }

    #[test]
    fn single_perturbation_arrival_is_event1() {
        let grid = grid_1d(1, 4);
        let geom = Arc::new(environment_geometry(&grid).unwrap());
        let k = CouplingKernel::nearest_neighbor(1, 1.0);
        let cr = checkerboard_perturbation(&k, 0.0, 0.3, 0.2, &geom).unwrap();
        let (c0, c1) = (cr.c0, cr.c1);
        let lambda = uniformization_rate(&[&c0, &c1]);
        let det = PerturbationDetector::new(&c0, &c1, lambda).unwrap();
        let mark = (0..10_000)
            .map(|i| i as f64 / 10_000.0)
            .find(|&u| det.is_perturbation(&geom, 0, u))
            .unwrap();
        let one = ArrivalStream::from_arrivals(geom.clone(), 9, lambda, (0.0, 1.0), vec![Arrival { time: 0.5, site: 0, mark }]).unwrap();
        let e = classify_box(&[0], 0, &one, &c0, &c1, &grid, DependenceMethod::Sandwich).unwrap();
        assert_eq!(e.verdict(), Verdict::BadEvent1);
    }

    #[test]
    fn clipped_stream_reproduces_verdict() {
        let grid = grid_1d(2, 6);
        let c = ising(1, 0.3);
        let geom = Arc::new(Geometry::cube(1, 30, 1, Boundary::Periodic).unwrap());
        let lambda = uniformization_rate(&[&c]);
        for seed in 0..200 {
            let s = sample_arrivals(geom.clone(), lambda, (0.0, 6.0), seed).unwrap();
            let k = [2i64];
            let (b, t) = grid.time_extent(1);
            let (lo, hi) = (2 * 6 - 6, 2 * 6 + 12);
            let clipped = s.restrict_time(b, t).restrict_sites(|y| (lo..hi).contains(&(y as i64)));
            for m in [DependenceMethod::Sandwich, DependenceMethod::Overapprox] {
                let full = classify_box(&k, 1, &s, &c, &c, &grid, m).unwrap();
                let local = classify_box(&k, 1, &clipped, &c, &c, &grid, m).unwrap();
                assert_eq!(full, local, "seed {seed}");
            }
        }
    }

    #[test]
    fn exact_never_worse_than_overapprox() {
        let grid = grid_1d(1, 2);
        let geom = Arc::new(environment_geometry(&grid).unwrap());
        let c = ising(1, 0.4);
        let lambda = uniformization_rate(&[&c]);
        for seed in 0..200 {
            let s = sample_arrivals(geom.clone(), lambda, (0.0, 1.0), seed).unwrap();
            let ex = classify_box(&[0], 0, &s, &c, &c, &grid, DependenceMethod::Exact).unwrap();
            let ov = classify_box(&[0], 0, &s, &c, &c, &grid, DependenceMethod::Overapprox).unwrap();
            let sw = classify_box(&[0], 0, &s, &c, &c, &grid, DependenceMethod::Sandwich).unwrap();
            assert!(!ex.is_bad() || ov.is_bad());
            assert_eq!(ex.event3, sw.event3, "seed {seed}");
        }
    }

    #[test]
    fn large_epsilon_event1_matches_poisson() {
        let grid = grid_1d(1, 2);
        let k = CouplingKernel::nearest_neighbor(1, 1.0);
        let geom = environment_geometry(&grid).unwrap();
        let cr = checkerboard_perturbation(&k, 0.0, 0.5, 0.5, &geom).unwrap();
        let (c0, c1) = (cr.c0, cr.c1);
        let pt = bad_probability(&grid, &c0, &c1, 4000, DependenceMethod::Sandwich, 3).unwrap();
        let pred = event1_prediction(&grid, &c0, &c1).unwrap();
        assert!((pt.event1_frac - pred).abs() < 4.0 * binomial_stderr(pred, 4000) + 1e-3, "{} vs {pred}", pt.event1_frac);
        let base = bad_probability(&grid, &c0, &c0, 4000, DependenceMethod::Sandwich, 3).unwrap();
        assert_eq!(base.event1_frac, 0.0);
        assert!(base.p_bad <= pt.p_bad);
    }
}
