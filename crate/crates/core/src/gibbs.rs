//! Finite-volume Ising Gibbs states with β absorbed into `(J, h)`.
//!
//! `-H(σ) = Σ_{pairs in S} J σσ + Σ_S h σ + b Σ_{x∈S, y outside the box} J_xy σ(x)`,
//! each unordered pair counted once. Sites of the ambient box that are not in
//! the region `S` do not interact with `S`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphical::{sample_arrivals, Chain};
use crate::lattice::{Boundary, Geometry, Site, Spin, SpinConfig};
use crate::rates::{glauber_general, uniformization_rate, CouplingKernel};
use crate::seeding::mix;
use crate::stats::{batch_means, log_sum_exp, KahanSum};

/// Largest region handled by exact enumeration.
pub const MAX_ENUM_SITES: usize = 20;

#[derive(Clone, Debug)]
pub struct GibbsSpec {
    geom: Geometry,
    region: Vec<usize>,
    kernel: CouplingKernel,
    h: f64,
    pairs: Vec<(usize, usize, f64)>,
    fields: Vec<f64>,
}

impl GibbsSpec {
    /// Spec on the whole box; the boundary mode is the geometry's.
    pub fn on_box(geom: &Geometry, kernel: CouplingKernel, h: f64) -> Result<Self> {
        Self::with_region(geom, (0..geom.n_sites()).collect(), kernel, h)
    }

    /// Spec on a region of the box (box site indices, each listed once).
    pub fn with_region(geom: &Geometry, region: Vec<usize>, kernel: CouplingKernel, h: f64) -> Result<Self> {
        if kernel.dim() != geom.dim() {
            return Err(Error::GeometryMismatch("kernel and geometry dimensions differ".into()));
        }
        if !h.is_finite() {
            return Err(Error::Invalid("field must be finite".into()));
        }
        let mut local = vec![usize::MAX; geom.n_sites()];
        for (i, &x) in region.iter().enumerate() {
            if x >= geom.n_sites() || local[x] != usize::MAX {
                return Err(Error::Invalid(format!("region site {x} invalid or repeated")));
            }
            local[x] = i;
        }
        let b = match geom.boundary() {
            Boundary::Plus => 1.0,
            Boundary::Minus => -1.0,
            Boundary::Free | Boundary::Periodic => 0.0,
        };
        let mut pairs = Vec::new();
        let mut fields = vec![h; region.len()];
        for (i, &x) in region.iter().enumerate() {
            let base = geom.site(x);
            let shifted = |o: &[i64]| Site(base.0.iter().zip(o).map(|(c, d)| c + d).collect());
            for (o, j) in kernel.positive_half() {
                if let Some(y) = geom.index_of(&shifted(o)) {
                    if y != x && local[y] != usize::MAX {
                        pairs.push((i, local[y], *j));
                    }
                }
            }
            for (o, j) in kernel.entries() {
                if geom.index_of(&shifted(o)).is_none() {
                    fields[i] += b * j;
                }
            }
        }
        Ok(GibbsSpec {
            geom: geom.clone(),
            region,
            kernel,
            h,
            pairs,
            fields,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }
    pub fn region(&self) -> &[usize] {
        &self.region
    }
    pub fn kernel(&self) -> &CouplingKernel {
        &self.kernel
    }
    pub fn field(&self) -> f64 {
        self.h
    }
    pub fn boundary(&self) -> Boundary {
        self.geom.boundary()
    }

    /// `-H` of spins listed in region order.
    pub fn neg_energy(&self, spins: &[Spin]) -> Result<f64> {
        if spins.len() != self.region.len() {
            return Err(Error::GeometryMismatch("spin vector does not match region".into()));
        }
        Ok(self.neg_energy_with(|i| spins[i]))
    }

    /// `-H` of a configuration on the whole box (only region sites are read).
    pub fn neg_energy_config(&self, config: &SpinConfig) -> f64 {
        self.neg_energy_with(|i| config.get(self.region[i]))
    }

    fn neg_energy_with(&self, spin: impl Fn(usize) -> Spin) -> f64 {
        let mut e = KahanSum::new();
        for &(i, j, c) in &self.pairs {
            e.add(c * f64::from(spin(i) * spin(j)));
        }
        for (i, f) in self.fields.iter().enumerate() {
            e.add(f * f64::from(spin(i)));
        }
        e.value()
    }

    fn check_enumerable(&self) -> Result<usize> {
        let n = self.region.len();
        if n > MAX_ENUM_SITES {
            return Err(Error::TooLarge {
                what: "enumeration region",
                size: n,
                limit: MAX_ENUM_SITES,
            });
        }
        Ok(n)
    }

    /// `-H` of every configuration; bit `i` of the index is region site `i`
    /// (set ⇔ `+1`).
    pub fn log_weights(&self) -> Result<Vec<f64>> {
        let n = self.check_enumerable()?;
        Ok((0..1usize << n)
            .map(|s| self.neg_energy_with(|i| if (s >> i) & 1 == 1 { 1 } else { -1 }))
            .collect())
    }

    pub fn log_partition(&self) -> Result<f64> {
        Ok(log_sum_exp(&self.log_weights()?))
    }

    pub fn partition_function(&self) -> Result<f64> {
        Ok(self.log_partition()?.exp())
    }

    /// Exact expectation of `f` (spins in region order).
    pub fn exact_expectation(&self, f: impl Fn(&[Spin]) -> f64) -> Result<f64> {
        let lw = self.log_weights()?;
        let n = self.region.len();
        let lz = log_sum_exp(&lw);
        let mut spins = vec![-1 as Spin; n];
        let mut acc = KahanSum::new();
        for (s, w) in lw.iter().enumerate() {
            for (i, sp) in spins.iter_mut().enumerate() {
                *sp = if (s >> i) & 1 == 1 { 1 } else { -1 };
            }
            acc.add(f(&spins) * (w - lz).exp());
        }
        Ok(acc.value())
    }

    /// Position of the box center in the region.
    pub fn center_position(&self) -> Result<usize> {
        let c = self.geom.center_index();
        self.region
            .iter()
            .position(|&x| x == c)
            .ok_or_else(|| Error::Invalid("box center is not in the region".into()))
    }

    /// Exact `⟨σ⟩` at the box center.
    pub fn center_magnetization(&self) -> Result<f64> {
        let c = self.center_position()?;
        self.exact_expectation(|s| f64::from(s[c]))
    }
}

/// `⟨σ_center⟩` of the nearest-neighbor chain of length `len` by transfer
/// matrices, with coupling `j`, field `h` and boundary spin `b` outside both
/// ends (free: none). The center is site `len / 2`.
pub fn transfer_magnetization_1d(len: usize, j: f64, h: f64, boundary: Boundary) -> Result<f64> {
    if len == 0 {
        return Err(Error::Invalid("chain length must be at least 1".into()));
    }
    let b = match boundary {
        Boundary::Plus => 1.0,
        Boundary::Minus => -1.0,
        Boundary::Free => 0.0,
        Boundary::Periodic => return Err(Error::Invalid("transfer chain takes plus, minus or free".into())),
    };
    let spins = [-1.0, 1.0];
    let site_weight = |i: usize, s: f64| {
        let ext = b * j * (f64::from(u8::from(i == 0)) + f64::from(u8::from(i == len - 1)));
        ((h + ext) * s).exp()
    };
    let bond = |s: f64, t: f64| (j * s * t).exp();
    let normalize = |v: [f64; 2]| {
        let m = v[0].max(v[1]);
        [v[0] / m, v[1] / m]
    };
    let center = len / 2;
    // forward: weight of sites 0..=i with site i fixed, site i included
    let mut fwd = [site_weight(0, -1.0), site_weight(0, 1.0)];
    for i in 1..=center {
        let prev = normalize(fwd);
        fwd = [0, 1].map(|k| {
            let t = spins[k];
            (prev[0] * bond(-1.0, t) + prev[1] * bond(1.0, t)) * site_weight(i, t)
        });
    }
    // backward: weight of sites i..len with site i fixed, site i excluded
    let mut bwd = [1.0, 1.0];
    for i in (center + 1..len).rev() {
        let next = normalize(bwd);
        let with_site = [next[0] * site_weight(i, -1.0), next[1] * site_weight(i, 1.0)];
        bwd = [0, 1].map(|k| {
            let s = spins[k];
            with_site[0] * bond(s, -1.0) + with_site[1] * bond(s, 1.0)
        });
    }
    let wm = fwd[0] * bwd[0];
    let wp = fwd[1] * bwd[1];
    Ok((wp - wm) / (wp + wm))
}

/// MCMC run lengths (in units of dynamics time).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcOptions {
    pub burn_in: f64,
    pub samples: usize,
    pub thinning: f64,
    pub batches: usize,
}

impl Default for McmcOptions {
    fn default() -> Self {
        McmcOptions {
            burn_in: 20.0,
            samples: 4000,
            thinning: 0.5,
            batches: 20,
        }
    }
}

/// Time-average of `f` under Glauber dynamics reversible for `spec`
/// (β = 1 since it is absorbed), with a batch-means standard error. The
/// spec must cover its whole box; the run starts from all plus.
pub fn mcmc_expectation(
    spec: &GibbsSpec,
    f: impl Fn(&SpinConfig) -> f64,
    opts: McmcOptions,
    seed: u64,
) -> Result<(f64, f64)> {
    let geom = Arc::new(spec.geometry().clone());
    if spec.region().len() != geom.n_sites() {
        return Err(Error::Invalid("mcmc needs the region to be the whole box".into()));
    }
    if !(opts.thinning > 0.0) || opts.samples == 0 || !(opts.burn_in >= 0.0) {
        return Err(Error::Invalid("mcmc needs positive thinning and samples".into()));
    }
    let c = glauber_general(spec.kernel(), spec.field(), 1.0, geom.range())?;
    let lambda = uniformization_rate(&[&c]);
    let mut chain = Chain::new(&geom, &c, lambda, SpinConfig::all_plus(geom.n_sites()))?;
    let burn = sample_arrivals(geom.clone(), lambda, (0.0, opts.burn_in), mix(seed, &[0]))?;
    chain.run(burn.arrivals());
    let mut values = Vec::with_capacity(opts.samples);
    let mut t = opts.burn_in;
    for k in 0..opts.samples {
        let chunk = sample_arrivals(geom.clone(), lambda, (t, t + opts.thinning), mix(seed, &[k as u64 + 1]))?;
        chain.run(chunk.arrivals());
        t += opts.thinning;
        values.push(f(chain.config()));
    }
    Ok(batch_means(&values, opts.batches))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WsmMethod {
    Enumeration,
    Transfer,
    Mcmc,
}

impl WsmMethod {
    pub fn name(self) -> &'static str {
        match self {
            WsmMethod::Enumeration => "enumeration",
            WsmMethod::Transfer => "transfer",
            WsmMethod::Mcmc => "mcmc",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub side: usize,
    pub gap: f64,
    pub stderr: f64,
}

/// `⟨σ_center⟩⁺ − ⟨σ_center⟩⁻` on the cube of side `side` in `dim` dimensions.
pub fn wsm_gap(
    dim: usize,
    side: usize,
    kernel: &CouplingKernel,
    h: f64,
    method: WsmMethod,
    mcmc: McmcOptions,
    seed: u64,
) -> Result<GapEstimate> {
    let range = kernel.range().max(1);
    let (gap, stderr) = match method {
        WsmMethod::Transfer => {
            let nn = CouplingKernel::nearest_neighbor(1, kernel.entries().first().map_or(0.0, |e| e.1));
            if dim != 1 || (kernel.range() > 1) || (!kernel.entries().is_empty() && *kernel != nn) {
                return Err(Error::Invalid("transfer method needs a 1d nearest-neighbor kernel".into()));
            }
            let j = kernel.entries().first().map_or(0.0, |e| e.1);
            let p = transfer_magnetization_1d(side, j, h, Boundary::Plus)?;
            let m = transfer_magnetization_1d(side, j, h, Boundary::Minus)?;
            (p - m, 0.0)
        }
        WsmMethod::Enumeration => {
            let g = Geometry::cube(dim, side, range, Boundary::Plus)?;
            let p = GibbsSpec::on_box(&g, kernel.clone(), h)?.center_magnetization()?;
            let g = g.with_boundary(Boundary::Minus);
            let m = GibbsSpec::on_box(&g, kernel.clone(), h)?.center_magnetization()?;
            (p - m, 0.0)
        }
        WsmMethod::Mcmc => {
            let g = Geometry::cube(dim, side, range, Boundary::Plus)?;
            let center = g.center_index();
            let obs = |c: &SpinConfig| f64::from(c.get(center));
            let (p, sp) = mcmc_expectation(&GibbsSpec::on_box(&g, kernel.clone(), h)?, obs, mcmc, mix(seed, &[1]))?;
            let g = g.with_boundary(Boundary::Minus);
            let (m, sm) = mcmc_expectation(&GibbsSpec::on_box(&g, kernel.clone(), h)?, obs, mcmc, mix(seed, &[2]))?;
            (p - m, sp.hypot(sm))
        }
    };
    Ok(GapEstimate { side, gap, stderr })
}
