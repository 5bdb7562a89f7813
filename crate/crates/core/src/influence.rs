//! Backward dependence sets, influence clusters, lightrays and survival
//! statistics.
//!
//! For a target `(x, t)` the configuration "at time s" is the one after every
//! arrival with time `≤ s`; a forward run from `s` uses the arrivals with
//! `s < time ≤ t`. `Y(s)` is the set of sites whose spin at time `s` can
//! change `σ_t(x)`. It changes only at arrival times and, once empty, stays
//! empty further back.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphical::{sample_arrivals, sandwich_pair, Arrival, ArrivalStream, Chain, Thresholds};
use crate::lattice::{Geometry, SpinConfig, EXTERIOR};
use crate::rates::{uniformization_rate, RateFamily};
use crate::seeding::replica_seed;
use crate::stats::binomial_stderr;

/// Default bound on `|Y|` for the exact method.
pub const DEFAULT_EXACT_CAP: usize = 20;

/// Largest truth table (in variables) the exact method will build.
const MAX_TABLE_VARS: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DependenceMethod {
    Exact,
    Sandwich,
    Overapprox,
}

impl DependenceMethod {
    pub fn name(self) -> &'static str {
        match self {
            DependenceMethod::Exact => "exact",
            DependenceMethod::Sandwich => "sandwich",
            DependenceMethod::Overapprox => "overapprox",
        }
    }
}

/// A site entering (`entered = true`) or leaving `Y` when `s` drops below `time`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Change {
    pub time: f64,
    pub site: usize,
    pub entered: bool,
}

/// `s ↦ Y(s)` for `floor ≤ s ≤ t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DependenceSet {
    pub target: (usize, f64),
    pub floor: f64,
    pub method: DependenceMethod,
    /// Change log in decreasing time; `None` when only emptiness is known.
    changes: Option<Vec<Change>>,
    /// `Y(s) = ∅` exactly for `s < extinction`.
    extinction: Option<f64>,
}

impl DependenceSet {
    pub fn extinction(&self) -> Option<f64> {
        self.extinction
    }

    /// Whether `Y(s) ≠ ∅` (for `floor ≤ s ≤ t`).
    pub fn is_nonempty(&self, s: f64) -> bool {
        self.extinction.is_none_or(|e| s >= e)
    }

    pub fn changes(&self) -> Option<&[Change]> {
        self.changes.as_deref()
    }

    /// `Y(s)` sorted, if the method tracks sets.
    pub fn at(&self, s: f64) -> Option<Vec<usize>> {
        let changes = self.changes.as_ref()?;
        let mut set = vec![self.target.0];
        for c in changes.iter().take_while(|c| c.time > s) {
            if c.entered {
                set.push(c.site);
            } else if let Some(p) = set.iter().position(|&y| y == c.site) {
                set.swap_remove(p);
            }
        }
        set.sort_unstable();
        Some(set)
    }

    /// Times where `Y` changes, decreasing.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.changes.iter().flatten().map(|c| c.time).collect();
        ts.dedup();
        ts
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DependenceOptions {
    /// Lowest time analyzed; defaults to the stream's window start.
    pub floor: Option<f64>,
    /// Cap on `|Y|` for the exact method.
    pub cap: usize,
}

impl Default for DependenceOptions {
    fn default() -> Self {
        DependenceOptions {
            floor: None,
            cap: DEFAULT_EXACT_CAP,
        }
    }
}

fn check_window(stream: &ArrivalStream, t: f64, floor: f64) -> Result<()> {
    let (a, b) = stream.window();
    if t > b || floor < a || floor > t {
        return Err(Error::Coverage(format!(
            "target time {t} with floor {floor} outside window ({a}, {b}]"
        )));
    }
    Ok(())
}

fn require_attractive(c: &RateFamily) -> Result<()> {
    match c.is_attractive() {
        (true, _) => Ok(()),
        (false, Some((hi, lo))) => Err(Error::NotAttractive(format!(
            "patterns {} ≥ {} violate monotonicity",
            hi.index, lo.index
        ))),
        (false, None) => Err(Error::NotAttractive(String::new())),
    }
}

/// Computes `Y_{x,t}(s)` for `s` down to the floor.
pub fn backward_dependence(
    x: usize,
    t: f64,
    stream: &ArrivalStream,
    c: &RateFamily,
    method: DependenceMethod,
    opts: DependenceOptions,
) -> Result<DependenceSet> {
    let floor = opts.floor.unwrap_or(stream.window().0);
    check_window(stream, t, floor)?;
    let geom = stream.geometry();
    if x >= geom.n_sites() {
        return Err(Error::Invalid(format!("target site {x} outside geometry")));
    }
    let thr = Thresholds::new(c, stream.lambda())?;
    c.validate_for(geom)?;
    match method {
        DependenceMethod::Overapprox => {
            let walk = overapprox_walk(&[x], t, floor, stream, &thr, true, false);
            Ok(DependenceSet {
                target: (x, t),
                floor,
                method,
                changes: walk.changes,
                extinction: walk.extinction,
            })
        }
        DependenceMethod::Exact => exact_dependence(x, t, floor, stream, &thr, opts.cap),
        DependenceMethod::Sandwich => {
            require_attractive(c)?;
            let cone = Cone::build(x, t, floor, stream, c)?;
            Ok(DependenceSet {
                target: (x, t),
                floor,
                method,
                changes: None,
                extinction: cone.extinction()?,
            })
        }
    }
}

struct Walk {
    changes: Option<Vec<Change>>,
    extinction: Option<f64>,
    /// Indices (into the stream) of arrivals met by the set, increasing.
    relevant: Vec<usize>,
}

/// Backward reachability: an arrival at a site of the set removes it when the
/// mark fixes the outcome for every pattern, and otherwise replaces it by
/// its neighborhood. Starts from `seeds` at time `t`.
fn overapprox_walk(
    seeds: &[usize],
    t: f64,
    floor: f64,
    stream: &ArrivalStream,
    thr: &Thresholds,
    log_changes: bool,
    keep_relevant: bool,
) -> Walk {
    let geom = stream.geometry();
    let n = geom.n_sites();
    let mut member = vec![false; n];
    let mut size = 0usize;
    for &s in seeds {
        if !member[s] {
            member[s] = true;
            size += 1;
        }
    }
    let bounds: Vec<(f64, f64)> = (0..thr.variants()).map(|v| thr.bounds(v)).collect();
    let lo = stream.first_after(floor);
    let hi = stream.first_after(t);
    let arrivals = stream.arrivals();
    let mut changes = log_changes.then(Vec::new);
    let mut relevant = Vec::new();
    let mut extinction = None;
    if size == 0 {
        extinction = Some(f64::INFINITY);
    }
    for i in (lo..hi).rev() {
        if size == 0 {
            break;
        }
        let a = &arrivals[i];
        let z = a.site as usize;
        if !member[z] {
            continue;
        }
        if keep_relevant {
            relevant.push(i);
        }
        let (vmin, vmax) = bounds[thr.variant(geom, z)];
        if a.mark >= vmax || a.mark < vmin {
            member[z] = false;
            size -= 1;
            if let Some(ch) = changes.as_mut() {
                ch.push(Change {
                    time: a.time,
                    site: z,
                    entered: false,
                });
            }
            if size == 0 {
                extinction = Some(a.time);
            }
        } else {
            for &slot in geom.slots(z) {
                if slot != EXTERIOR && !member[slot as usize] {
                    member[slot as usize] = true;
                    size += 1;
                    if let Some(ch) = changes.as_mut() {
                        ch.push(Change {
                            time: a.time,
                            site: slot as usize,
                            entered: true,
                        });
                    }
                }
            }
        }
    }
    relevant.reverse();
    Walk {
        changes,
        extinction,
        relevant,
    }
}

/// Overapproximated `Y(s) ≠ ∅` for a set of targets at a common time.
pub fn overapprox_survives(seeds: &[usize], t: f64, s: f64, stream: &ArrivalStream, c: &RateFamily) -> Result<bool> {
    check_window(stream, t, s)?;
    let thr = Thresholds::new(c, stream.lambda())?;
    let walk = overapprox_walk(seeds, t, s, stream, &thr, false, false);
    Ok(walk.extinction.is_none())
}

/// Truth-table composition backward in time.
fn exact_dependence(x: usize, t: f64, floor: f64, stream: &ArrivalStream, thr: &Thresholds, cap: usize) -> Result<DependenceSet> {
    let geom = stream.geometry();
    let ext_bit = geom.boundary().exterior_bit();
    let max_vars = (cap + geom.pattern_len()).min(MAX_TABLE_VARS);
    let mut vars: Vec<usize> = vec![x];
    // bit i of table index = spin (1 ⇔ +1) of vars[i]
    let mut table: Vec<bool> = vec![false, true];
    let mut changes = Vec::new();
    let mut extinction = None;
    let lo = stream.first_after(floor);
    let hi = stream.first_after(t);
    let arrivals = stream.arrivals();
    for i in (lo..hi).rev() {
        let a = &arrivals[i];
        let z = a.site as usize;
        let Some(pz) = vars.iter().position(|&v| v == z) else {
            continue;
        };
        let mut new_vars: Vec<usize> = vars.iter().copied().filter(|&v| v != z).collect();
        for &slot in geom.slots(z) {
            if slot != EXTERIOR && !new_vars.contains(&(slot as usize)) {
                new_vars.push(slot as usize);
            }
        }
        if new_vars.len() > max_vars {
            return Err(Error::CapExceeded {
                cap,
                size: new_vars.len(),
            });
        }
        let pos = |site: usize| new_vars.iter().position(|&v| v == site).expect("site in new vars");
        let old_pos: Vec<Option<usize>> = vars.iter().map(|&v| (v != z).then(|| pos(v))).collect();
        let slot_pos: Vec<Option<usize>> = geom
            .slots(z)
            .iter()
            .map(|&s| (s != EXTERIOR).then(|| pos(s as usize)))
            .collect();
        let variant = thr.variant(geom, z);
        let k = new_vars.len();
        let mut new_table = vec![false; 1usize << k];
        for (idx, entry) in new_table.iter_mut().enumerate() {
            let pattern = slot_pos.iter().fold(0u32, |acc, p| {
                let bit = p.map_or(ext_bit, |q| ((idx >> q) & 1) as u32);
                (acc << 1) | bit
            });
            let g = a.mark >= thr.value(variant, pattern);
            let old = old_pos.iter().enumerate().fold(0usize, |acc, (j, p)| {
                let bit = match p {
                    Some(q) => (idx >> q) & 1,
                    None => usize::from(g),
                };
                acc | (bit << j)
            });
            debug_assert_eq!(old_pos[pz], None);
            *entry = table[old];
        }
        let (pruned_vars, pruned_table) = prune(new_vars, new_table);
        if pruned_vars.len() > cap {
            return Err(Error::CapExceeded {
                cap,
                size: pruned_vars.len(),
            });
        }
        for &v in &vars {
            if !pruned_vars.contains(&v) {
                changes.push(Change {
                    time: a.time,
                    site: v,
                    entered: false,
                });
            }
        }
        for &v in &pruned_vars {
            if !vars.contains(&v) {
                changes.push(Change {
                    time: a.time,
                    site: v,
                    entered: true,
                });
            }
        }
        vars = pruned_vars;
        table = pruned_table;
        if vars.is_empty() {
            extinction = Some(a.time);
            break;
        }
    }
    Ok(DependenceSet {
        target: (x, t),
        floor,
        method: DependenceMethod::Exact,
        changes: Some(changes),
        extinction,
    })
}

/// Drops variables the Boolean function does not depend on.
fn prune(vars: Vec<usize>, table: Vec<bool>) -> (Vec<usize>, Vec<bool>) {
    let k = vars.len();
    let depends: Vec<bool> = (0..k)
        .map(|q| (0..table.len()).any(|i| i & (1 << q) == 0 && table[i] != table[i | (1 << q)]))
        .collect();
    if depends.iter().all(|&d| d) {
        return (vars, table);
    }
    let keep: Vec<usize> = (0..k).filter(|&q| depends[q]).collect();
    let new_vars = keep.iter().map(|&q| vars[q]).collect();
    let new_table = (0..1usize << keep.len())
        .map(|j| {
            let old = keep.iter().enumerate().fold(0usize, |acc, (b, &q)| acc | (((j >> b) & 1) << q));
            table[old]
        })
        .collect();
    (new_vars, new_table)
}

/// Arrivals that can influence `σ_t(x)`, evaluated forward from the two
/// extreme starts.
struct Cone<'a> {
    x: usize,
    stream: &'a ArrivalStream,
    c: &'a RateFamily,
    relevant: Vec<usize>,
}

impl<'a> Cone<'a> {
    fn build(x: usize, t: f64, floor: f64, stream: &'a ArrivalStream, c: &'a RateFamily) -> Result<Self> {
        let thr = Thresholds::new(c, stream.lambda())?;
        let walk = overapprox_walk(&[x], t, floor, stream, &thr, false, true);
        Ok(Cone {
            x,
            stream,
            c,
            relevant: walk.relevant,
        })
    }

    /// Disagreement at the target when starting at the time just below
    /// relevant arrival `k` (all relevant arrivals from index `k` on run).
    fn disagree_from(&self, k: usize) -> Result<bool> {
        let geom = self.stream.geometry();
        let n = geom.n_sites();
        let lambda = self.stream.lambda();
        let mut plus = Chain::new(geom, self.c, lambda, SpinConfig::all_plus(n))?;
        let mut minus = Chain::new(geom, self.c, lambda, SpinConfig::all_minus(n))?;
        let arrivals = self.stream.arrivals();
        for &i in &self.relevant[k..] {
            plus.apply(&arrivals[i]);
            minus.apply(&arrivals[i]);
        }
        Ok(plus.config().get(self.x) != minus.config().get(self.x))
    }

    /// Disagreement when the forward run starts at time `s`.
    fn disagree_at(&self, s: f64) -> Result<bool> {
        let arrivals = self.stream.arrivals();
        let k = self.relevant.partition_point(|&i| arrivals[i].time <= s);
        self.disagree_from(k)
    }

    /// Smallest relevant arrival time from which the chains still disagree,
    /// found by bisection (disagreement is monotone in the start time).
    fn extinction(&self) -> Result<Option<f64>> {
        let m = self.relevant.len();
        if self.disagree_from(0)? {
            return Ok(None);
        }
        // invariant: disagree_from(lo) false, disagree_from(hi) true
        let (mut lo, mut hi) = (0usize, m);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.disagree_from(mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(Some(self.stream.arrivals()[self.relevant[hi - 1]].time))
    }
}

/// `1{Y_{x,t}(s) ≠ ∅}` from the ± coupling restricted to the arrivals that
/// can reach the target. Requires attractive rates.
pub fn sandwich_indicator(x: usize, t: f64, s: f64, stream: &ArrivalStream, c: &RateFamily) -> Result<bool> {
    check_window(stream, t, s)?;
    require_attractive(c)?;
    c.validate_for(stream.geometry())?;
    Cone::build(x, t, s, stream, c)?.disagree_at(s)
}

/// Space-time points reachable by backward lightrays: each reached site with
/// the latest time at which a ray can sit there. A site with join time `u` is
/// reached on `[floor, u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LightrayReach {
    pub floor: f64,
    joins: Vec<Option<f64>>,
}

impl LightrayReach {
    pub fn join_time(&self, site: usize) -> Option<f64> {
        self.joins[site]
    }

    pub fn contains(&self, site: usize, time: f64) -> bool {
        time >= self.floor && self.joins[site].is_some_and(|u| time <= u)
    }

    /// Reached sites with their join times.
    pub fn sites(&self) -> Vec<(usize, f64)> {
        self.joins
            .iter()
            .enumerate()
            .filter_map(|(y, j)| j.map(|u| (y, u)))
            .collect()
    }
}

/// Lightrays from `(x, t)` down to time `s`.
pub fn lightray_reach(x: usize, t: f64, stream: &ArrivalStream, s: f64) -> Result<LightrayReach> {
    lightray_reach_set(&[x], t, stream, s, |_| false).map(|(r, _)| r)
}

/// Lightrays from every `(x, t)` with `x ∈ sources`, down to `s`. Stops early
/// (second value `true`) as soon as a site accepted by `stop` is reached.
pub fn lightray_reach_set(
    sources: &[usize],
    t: f64,
    stream: &ArrivalStream,
    s: f64,
    stop: impl Fn(usize) -> bool,
) -> Result<(LightrayReach, bool)> {
    check_window(stream, t, s)?;
    let geom = stream.geometry();
    let mut joins = vec![None; geom.n_sites()];
    for &x in sources {
        joins[x] = Some(t);
        if stop(x) {
            return Ok((LightrayReach { floor: s, joins }, true));
        }
    }
    let lo = stream.first_after(s);
    let hi = stream.first_after(t);
    let arrivals = stream.arrivals();
    for a in arrivals[lo..hi].iter().rev() {
        if joins[a.site as usize].is_none() {
            continue;
        }
        for &slot in geom.slots(a.site as usize) {
            if slot != EXTERIOR && joins[slot as usize].is_none() {
                joins[slot as usize] = Some(a.time);
                if stop(slot as usize) {
                    return Ok((LightrayReach { floor: s, joins }, true));
                }
            }
        }
    }
    Ok((LightrayReach { floor: s, joins }, false))
}

/// A closed strip `{site} × [lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Strip {
    pub site: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Closure of `∪_s Y(s) × {s}` as a union of strips.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceCluster {
    pub target: (usize, f64),
    pub floor: f64,
    pub strips: Vec<Strip>,
}

impl InfluenceCluster {
    pub fn contains(&self, site: usize, time: f64) -> bool {
        self.strips.iter().any(|s| s.site == site && s.lo <= time && time <= s.hi)
    }

    /// Whether the cluster reaches down to `time`.
    pub fn reaches(&self, time: f64) -> bool {
        self.strips.iter().any(|s| s.lo <= time)
    }

    /// Whether some strip sits on a site accepted by `pred`.
    pub fn touches(&self, pred: impl Fn(usize) -> bool) -> bool {
        self.strips.iter().any(|s| pred(s.site))
    }

    pub fn min_time(&self) -> f64 {
        self.strips.iter().map(|s| s.lo).fold(f64::INFINITY, f64::min)
    }
}

/// Cluster of a dependence set that tracks sets (not the sandwich method).
pub fn cluster_of(dep: &DependenceSet) -> Result<InfluenceCluster> {
    let changes = dep
        .changes()
        .ok_or_else(|| Error::Invalid("cluster needs a dependence set with tracked sets".into()))?;
    let (x, t) = dep.target;
    // open strips: site -> top time
    let mut open: Vec<(usize, f64)> = vec![(x, t)];
    let mut strips = Vec::new();
    for ch in changes {
        if ch.entered {
            open.push((ch.site, ch.time));
        } else if let Some(p) = open.iter().position(|&(y, _)| y == ch.site) {
            let (y, top) = open.swap_remove(p);
            strips.push(Strip {
                site: y,
                lo: ch.time,
                hi: top,
            });
        }
    }
    for (y, top) in open {
        strips.push(Strip {
            site: y,
            lo: dep.floor,
            hi: top,
        });
    }
    Ok(InfluenceCluster {
        target: dep.target,
        floor: dep.floor,
        strips,
    })
}

/// One point of a survival scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalPoint {
    pub t: f64,
    pub p_hat: f64,
    pub stderr: f64,
    pub method: DependenceMethod,
    pub replicas: usize,
}

/// Per-replica survival indicators at each horizon, for a target at site 0
/// at time `T = max horizon` on one stream over `[0, T]`; horizon `h` asks
/// whether `Y(T − h) ≠ ∅`.
pub fn survival_indicators(
    c: &RateFamily,
    geom: &std::sync::Arc<Geometry>,
    horizons: &[f64],
    method: DependenceMethod,
    seed: u64,
) -> Result<Vec<bool>> {
    let top = horizons.iter().copied().fold(0.0f64, f64::max);
    if horizons.iter().any(|&h| !(h >= 0.0)) {
        return Err(Error::Invalid("horizons must be nonnegative".into()));
    }
    let lambda = uniformization_rate(&[c]);
    let stream = sample_arrivals(geom.clone(), lambda, (0.0, top), seed)?;
    let x = geom.origin_index();
    match method {
        DependenceMethod::Sandwich => horizons
            .iter()
            .map(|&h| sandwich_pair(c, &stream, x, top - h, top))
            .collect(),
        _ => {
            let opts = DependenceOptions {
                floor: Some(0.0),
                ..DependenceOptions::default()
            };
            let dep = backward_dependence(x, top, &stream, c, method, opts)?;
            Ok(horizons.iter().map(|&h| dep.is_nonempty(top - h)).collect())
        }
    }
}

/// Fraction of replicas with `Y(0) ≠ ∅` at each horizon.
pub fn survival_scan(
    c: &RateFamily,
    geom: &Geometry,
    horizons: &[f64],
    replicas: usize,
    method: DependenceMethod,
    seed: u64,
) -> Result<Vec<SurvivalPoint>> {
    if method == DependenceMethod::Sandwich {
        require_attractive(c)?;
    }
    c.validate_for(geom)?;
    let top = horizons.iter().copied().fold(0.0f64, f64::max);
    let reach = 2.0 * geom.range() as f64 * uniformization_rate(&[c]) * top;
    if geom.sides().iter().any(|&s| (s as f64) < reach) {
        log::warn!("box side below 2·r·λ·t = {reach:.1}: lightrays may wrap around the torus");
    }
    let geom = std::sync::Arc::new(geom.clone());
    let rows = (0..replicas)
        .into_par_iter()
        .map(|i| survival_indicators(c, &geom, horizons, method, replica_seed(seed, "survival", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(horizons
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let hits = rows.iter().filter(|r| r[k]).count();
            let p = hits as f64 / replicas.max(1) as f64;
            SurvivalPoint {
                t,
                p_hat: p,
                stderr: binomial_stderr(p, replicas),
                method,
                replicas,
            }
        })
        .collect())
}

pub fn survival_estimate(
    c: &RateFamily,
    geom: &Geometry,
    t: f64,
    replicas: usize,
    method: DependenceMethod,
    seed: u64,
) -> Result<SurvivalPoint> {
    Ok(survival_scan(c, geom, &[t], replicas, method, seed)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichGap {
    pub t: f64,
    pub gap: f64,
    pub stderr: f64,
    pub replicas: usize,
    /// Replicas where the identity was checked (all of them on success).
    pub checked: usize,
}

/// Half the ± disagreement at the origin of one replica, checked against the
/// cone indicator.
fn gap_replica(c: &RateFamily, geom: &std::sync::Arc<Geometry>, t: f64, seed: u64, replica: usize) -> Result<i32> {
    let lambda = uniformization_rate(&[c]);
    let stream = sample_arrivals(geom.clone(), lambda, (0.0, t), seed)?;
    let n = geom.n_sites();
    let x = geom.origin_index();
    let finals = crate::graphical::coupled_evolve(
        vec![(SpinConfig::all_plus(n), c), (SpinConfig::all_minus(n), c)],
        &stream,
    )?;
    let half_gap = i32::from(finals[0].get(x) - finals[1].get(x)) / 2;
    let indicator = i32::from(sandwich_indicator(x, t, 0.0, &stream, c)?);
    if half_gap != indicator {
        return Err(Error::GapIdentity {
            replica,
            half_gap,
            indicator,
        });
    }
    Ok(half_gap)
}

/// `E⁺[σ_t(0)] − E⁻[σ_t(0)]` with the per-replica identity
/// `(σ⁺ − σ⁻)/2 = 1{Y(0) ≠ ∅}` enforced as a hard error.
pub fn sandwich_gap(c: &RateFamily, geom: &Geometry, t: f64, replicas: usize, seed: u64) -> Result<SandwichGap> {
    require_attractive(c)?;
    c.validate_for(geom)?;
    let geom = std::sync::Arc::new(geom.clone());
    let halves = (0..replicas)
        .into_par_iter()
        .map(|i| gap_replica(c, &geom, t, replica_seed(seed, "sandwich_gap", i as u64), i))
        .collect::<Result<Vec<i32>>>()?;
    let p = halves.iter().filter(|&&h| h == 1).count() as f64 / replicas.max(1) as f64;
    Ok(SandwichGap {
        t,
        gap: 2.0 * p,
        stderr: 2.0 * binomial_stderr(p, replicas),
        replicas,
        checked: replicas,
    })
}

/// Fitted `p(t) = C e^{−t/τ}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub c: f64,
    pub tau: f64,
    pub se_c: f64,
    pub se_tau: f64,
    pub r2: f64,
    pub points: usize,
    /// Trailing zero estimates left out of the fit.
    pub dropped_zeros: usize,
    /// Slope indistinguishable from zero; `tau` is then infinite.
    pub flat: bool,
}

/// Weighted least squares of `ln p` on `t` with weights `(p / stderr)²`
/// (unit weights when some stderr is zero).
pub fn fit_decay(series: &[(f64, f64, f64)]) -> Result<DecayFit> {
    let mut pts: Vec<(f64, f64, f64)> = series.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.iter().any(|&(t, p, se)| !t.is_finite() || !(p >= 0.0) || !(se >= 0.0)) {
        return Err(Error::Fit("points must have finite t, p ≥ 0 and stderr ≥ 0".into()));
    }
    let last_positive = pts.iter().rposition(|p| p.1 > 0.0);
    let keep = last_positive.map_or(0, |i| i + 1);
    let dropped = pts.len() - keep;
    pts.truncate(keep);
    if pts.iter().any(|p| p.1 == 0.0) {
        return Err(Error::Fit("zero estimate inside the fit range".into()));
    }
    if dropped > 0 {
        log::warn!("fit_decay: dropped {dropped} trailing zero estimates");
    }
    if pts.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 positive points, have {}", pts.len())));
    }
    let weighted = pts.iter().all(|p| p.2 > 0.0);
    let w: Vec<f64> = pts
        .iter()
        .map(|&(_, p, se)| if weighted { (p / se).powi(2) } else { 1.0 })
        .collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(&xs).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ym = w.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&xs).map(|(w, x)| w * (x - xm).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Fit("all points share one time".into()));
    }
    let sxy: f64 = (0..xs.len()).map(|i| w[i] * (xs[i] - xm) * (y[i] - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let rss: f64 = (0..xs.len()).map(|i| w[i] * (y[i] - intercept - slope * xs[i]).powi(2)).sum();
    let tss: f64 = (0..xs.len()).map(|i| w[i] * (y[i] - ym).powi(2)).sum();
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    // known variances when weighted, residual variance otherwise
    let scale = if weighted { 1.0 } else { rss / (xs.len() - 2) as f64 };
    let var_slope = scale / sxx;
    let var_intercept = scale * (1.0 / sw + xm * xm / sxx);
    let c = intercept.exp();
    let se_c = c * var_intercept.sqrt();
    let flat = slope.abs() <= 1e-12 * (1.0 + ym.abs());
    if flat {
        return Ok(DecayFit {
            c,
            tau: f64::INFINITY,
            se_c,
            se_tau: f64::INFINITY,
            r2,
            points: xs.len(),
            dropped_zeros: dropped,
            flat: true,
        });
    }
    if slope > 0.0 {
        return Err(Error::Fit(format!("series increases (slope {slope:.3e})")));
    }
    Ok(DecayFit {
        c,
        tau: -1.0 / slope,
        se_c,
        se_tau: var_slope.sqrt() / (slope * slope),
        r2,
        points: xs.len(),
        dropped_zeros: dropped,
        flat: false,
    })
}

/// Arrivals of a stream inside a site predicate and a time window; helper
/// for event checks.
pub fn arrivals_in<'s>(stream: &'s ArrivalStream, t0: f64, t1: f64, keep: impl Fn(usize) -> bool + 's) -> impl Iterator<Item = &'s Arrival> + 's {
    stream.between(t0, t1).iter().filter(move |a| keep(a.site as usize))
}
