use std::sync::Arc;

use spinlat::graphical::{sample_arrivals, ArrivalStream, PerturbationDetector};
use spinlat::influence::{backward_dependence, cluster_of, DependenceMethod, DependenceOptions, InfluenceCluster};
use spinlat::lattice::{Boundary, Geometry};
use spinlat::rates::{checkerboard_perturbation, glauber_rates, CouplingKernel, RateFamily};

const HORIZON: f64 = 1.5;

fn opts() -> DependenceOptions {
    DependenceOptions {
        floor: Some(0.0),
        ..DependenceOptions::default()
    }
}

fn overapprox_cluster(x: usize, t: f64, stream: &ArrivalStream, c: &RateFamily) -> InfluenceCluster {
    let dep = backward_dependence(x, t, stream, c, DependenceMethod::Overapprox, opts()).unwrap();
    cluster_of(&dep).unwrap()
}

/// Interior sample times of every strip, at or below `cut`.
fn probe_points(w: &InfluenceCluster, cut: f64) -> Vec<(usize, f64)> {
    let mut pts = Vec::new();
    for s in &w.strips {
        let hi = s.hi.min(cut);
        if hi <= s.lo {
            continue;
        }
        for k in 1..8 {
            pts.push((s.site, s.lo + (hi - s.lo) * k as f64 / 8.0));
        }
    }
    pts
}

fn setups() -> Vec<(Arc<Geometry>, RateFamily, RateFamily)> {
    let mut out = Vec::new();
    for (dim, side) in [(1, 16), (2, 8)] {
        let g = Geometry::cube(dim, side, 1, Boundary::Periodic).unwrap();
        let k = CouplingKernel::nearest_neighbor(dim, 1.0);
        let c0 = glauber_rates(&k, 0.1, 0.3, &g).unwrap();
        let cr = checkerboard_perturbation(&k, 0.1, 0.3, 0.3, &g).unwrap();
        assert_eq!(c0, cr.c0);
        out.push((Arc::new(g), cr.c0, cr.c1));
    }
    out
}

#[test]
fn restriction_to_earlier_times_is_covered_by_reseeded_clusters() {
    let mut checked = 0;
    for (geom, c0, _) in setups() {
        for seed in 0..60u64 {
            let lambda = 2.0 * c0.sup_rate();
            let stream = sample_arrivals(geom.clone(), lambda, (0.0, HORIZON), seed).unwrap();
            let w = overapprox_cluster(0, HORIZON, &stream, &c0);
            for frac in [0.3, 0.6, 0.85] {
                let u = HORIZON * frac;
                let seeds: Vec<usize> = (0..geom.n_sites()).filter(|&y| w.contains(y, u)).collect();
                let parts: Vec<InfluenceCluster> = seeds.iter().map(|&y| overapprox_cluster(y, u, &stream, &c0)).collect();
                for (y, s) in probe_points(&w, u) {
                    assert!(
                        parts.iter().any(|p| p.contains(y, s)),
                        "seed {seed}: ({y}, {s}) in cluster but not in the clusters seeded at time {u}"
                    );
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 1000, "only {checked} points probed");
}

#[test]
fn perturbed_cluster_is_a_string_of_unperturbed_clusters() {
    let mut with_perturbations = 0;
    for (geom, c0, c1) in setups() {
        let lambda = 2.0 * c0.sup_rate().max(c1.sup_rate());
        let detector = PerturbationDetector::new(&c0, &c1, lambda).unwrap();
        for seed in 0..80u64 {
            let stream = sample_arrivals(geom.clone(), lambda, (0.0, HORIZON), 1000 + seed).unwrap();
            let w1 = overapprox_cluster(0, HORIZON, &stream, &c1);
            let mut pieces = vec![overapprox_cluster(0, HORIZON, &stream, &c0)];
            let hits: Vec<_> = stream
                .arrivals()
                .iter()
                .filter(|a| detector.is_perturbation(&geom, a.site as usize, a.mark) && w1.contains(a.site as usize, a.time))
                .collect();
            if !hits.is_empty() {
                with_perturbations += 1;
            }
            for a in hits {
                // reseed just below the arrival so its own update is excluded
                let below = a.time.next_down();
                for nb in geom.neighborhood(a.site as usize) {
                    if let Some(y) = nb.index {
                        pieces.push(overapprox_cluster(y, below, &stream, &c0));
                    }
                }
            }
            for (y, s) in probe_points(&w1, HORIZON) {
                assert!(
                    pieces.iter().any(|p| p.contains(y, s)),
                    "seed {seed}: ({y}, {s}) in the perturbed cluster but in no unperturbed piece"
                );
            }
        }
    }
    assert!(with_perturbations > 20, "only {with_perturbations} streams exercised a perturbation arrival");
}
