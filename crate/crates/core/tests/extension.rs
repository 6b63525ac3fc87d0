use aeotgan::extension::{barycentric_coords, build_rips, select_epsilon, Barycentric, ExtendedMap};
use aeotgan::geometry::PointCloud;
use aeotgan::rng::RngStream;
use aeotgan::sdot::{solve, SdotProblem, SolverConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PointCloud {
    PointCloud::from_flat(d, (0..n * d).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn solved_map(codes: PointCloud, epsilon: f64) -> ExtendedMap {
    let problem = SdotProblem::uniform(codes.clone()).unwrap();
    let cfg = SolverConfig::for_targets(problem.len());
    let report = solve(&problem, &cfg, &RngStream::new(8, 0)).unwrap();
    assert!(report.converged);
    let rips = build_rips(&codes, epsilon).unwrap();
    ExtendedMap::new(problem, report.potential, report.stats, rips, None).unwrap()
}

/// Two clusters of `per` codes around (0.2, 0.2) and (0.8, 0.7).
fn two_clusters(per: usize) -> PointCloud {
    let mut r = RngStream::new(5, 5);
    let mut flat = Vec::new();
    for c in [[0.2, 0.2], [0.8, 0.7]] {
        for _ in 0..per {
            flat.push(c[0] + 0.04 * r.normal());
            flat.push(c[1] + 0.04 * r.normal());
        }
    }
    PointCloud::from_flat(2, flat).unwrap()
}

#[test]
fn rips_edges_match_all_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let codes = random_cloud(&mut rng, 50, 3);
    let eps = 0.35;
    let rips = build_rips(&codes, eps).unwrap();
    let mut count = 0;
    for i in 0..50 {
        for j in 0..50 {
            let want = i != j && dist(codes.point(i), codes.point(j)) <= eps;
            assert_eq!(rips.has_edge(i, j), want, "{i} {j}");
            count += usize::from(want && i < j);
        }
    }
    assert_eq!(rips.edge_count(), count);
    // components agree with reachability along edges
    for i in 0..50 {
        for &j in rips.neighbors(i) {
            assert_eq!(rips.component_of(i), rips.component_of(j));
        }
    }
    assert_eq!(rips.component_sizes().iter().sum::<usize>(), 50);
}

#[test]
fn simplex_rule_matches_pairwise_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let codes = random_cloud(&mut rng, 30, 2);
    let eps = 0.3;
    let rips = build_rips(&codes, eps).unwrap();
    for _ in 0..2000 {
        let t: Vec<usize> = (0..3).map(|_| rng.random_range(0..30)).collect();
        let want = (0..3).all(|a| {
            (0..3).all(|b| a == b || t[a] == t[b] || dist(codes.point(t[a]), codes.point(t[b])) <= eps)
        });
        assert_eq!(rips.is_simplex(&t).unwrap(), want);
    }
}

#[test]
fn summary_round_trips_through_json() {
    let codes = two_clusters(6);
    let eps = select_epsilon(&codes, 2).unwrap();
    let s = build_rips(&codes, eps).unwrap().summary();
    assert_eq!(s.component_count, 2);
    assert_eq!(s.component_sizes, vec![6, 6]);
    let text = serde_json::to_string(&s).unwrap();
    for key in ["epsilon", "n", "edge_count", "component_count", "component_sizes"] {
        assert!(text.contains(key));
    }
    assert_eq!(serde_json::from_str::<aeotgan::extension::RipsSummary>(&text).unwrap(), s);
}

proptest! {
    #[test]
    fn barycentric_reconstructs_interior_points(
        v in prop::collection::vec(0.0f64..1.0, 6),
        a in 0.01f64..1.0, b in 0.01f64..1.0, c in 0.01f64..1.0,
    ) {
        let tri: Vec<&[f64]> = vec![&v[0..2], &v[2..4], &v[4..6]];
        let area = ((v[2] - v[0]) * (v[5] - v[1]) - (v[4] - v[0]) * (v[3] - v[1])).abs();
        prop_assume!(area > 1e-3);
        let s = a + b + c;
        let w: Vec<f64> = (0..2).map(|k| (a * tri[0][k] + b * tri[1][k] + c * tri[2][k]) / s).collect();
        let Barycentric::Inside(l) = barycentric_coords(&w, &tri).unwrap() else {
            panic!("interior point rejected");
        };
        prop_assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..2 {
            let back: f64 = (0..3).map(|j| l[j] * tri[j][k]).sum();
            prop_assert!((back - w[k]).abs() < 1e-10);
        }
    }
}

#[test]
fn extend_at_a_centroid_returns_its_code() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let codes = random_cloud(&mut rng, 12, 2);
    let map = solved_map(codes.clone(), 0.4);
    for i in 0..12 {
        let c = map.centroids().point(i).to_vec();
        let e = map.extend_traced(&c).unwrap();
        // power cells are convex, so a mass center lies in its own cell
        assert_eq!(e.cell, i);
        for (a, b) in e.point.iter().zip(codes.point(i)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn extend_interpolates_along_an_edge() {
    let codes = PointCloud::from_flat(1, vec![0.3, 0.6]).unwrap();
    let map = solved_map(codes, 0.5);
    let (c0, c1) = (map.centroids().point(0)[0], map.centroids().point(1)[0]);
    let e = map.extend(&[0.5 * (c0 + c1)]).unwrap();
    assert!((e[0] - 0.45).abs() < 1e-12, "{}", e[0]);
}

#[test]
fn extend_falls_back_outside_the_complex() {
    // ε below the code separation: no edge, so every point maps to its code
    let codes = PointCloud::from_flat(1, vec![0.3, 0.6]).unwrap();
    let map = solved_map(codes, 0.1);
    let (c0, c1) = (map.centroids().point(0)[0], map.centroids().point(1)[0]);
    let w = 0.5 * (c0 + c1) - 1e-3;
    let e = map.extend_traced(&[w]).unwrap();
    assert!(e.simplex.is_none());
    assert_eq!(e.point.coords(), &[[0.3, 0.6][e.cell]]);
}

#[test]
fn single_code_is_every_sample() {
    let codes = PointCloud::from_flat(2, vec![0.7, -0.2]).unwrap();
    let map = solved_map(codes, 1.0);
    let s = map.sample_latent(1000, &RngStream::new(1, 2)).unwrap();
    assert!(s.iter().all(|p| p == [0.7, -0.2]));
}

#[test]
fn samples_stay_within_epsilon_of_a_code() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for (n, d, k) in [(20, 2, 3), (15, 1, 2), (25, 3, 4)] {
        let codes = random_cloud(&mut rng, n, d);
        let eps = select_epsilon(&codes, k).unwrap();
        let map = solved_map(codes.clone(), eps);
        let s = map.sample_latent(10_000, &RngStream::new(9, n as u64)).unwrap();
        for p in s.iter() {
            let m = codes.iter().map(|z| dist(p, z)).fold(f64::INFINITY, f64::min);
            assert!(m <= eps, "{m} > {eps}");
        }
    }
}

#[test]
fn edge_samples_fill_the_interior() {
    let codes = PointCloud::from_flat(1, vec![0.2, 0.7]).unwrap();
    let map = solved_map(codes, 0.6);
    let s = map.sample_latent(10_000, &RngStream::new(2, 2)).unwrap();
    let mut bins = [0usize; 4];
    for p in s.iter() {
        let t = (p[0] - 0.2) / 0.5;
        if t > 0.0 && t < 1.0 {
            bins[((t * 4.0) as usize).min(3)] += 1;
        }
    }
    assert!(bins.iter().all(|&b| b > 100), "{bins:?}");
}

#[test]
fn interpolation_never_crosses_components() {
    let codes = two_clusters(10);
    let eps = select_epsilon(&codes, 2).unwrap();
    let map = solved_map(codes, eps);
    let mut r = RngStream::new(3, 3);
    let mut interpolated = 0;
    for _ in 0..5000 {
        let w = [r.uniform(), r.uniform()];
        let e = map.extend_traced(&w).unwrap();
        if let Some(simplex) = e.simplex {
            interpolated += 1;
            let comp = map.rips().component_of(simplex[0].0);
            assert!(simplex.iter().all(|&(j, _)| map.rips().component_of(j) == comp));
        }
    }
    assert!(interpolated > 0);
}

#[test]
fn extension_is_linear_on_each_piece() {
    let codes = two_clusters(10);
    let eps = select_epsilon(&codes, 2).unwrap();
    let map = solved_map(codes, eps);
    let mut r = RngStream::new(4, 4);
    let vertices = |e: &aeotgan::extension::Extension| {
        e.simplex.as_ref().map(|s| s.iter().map(|x| x.0).collect::<Vec<_>>())
    };
    let mut checked = 0;
    for _ in 0..20_000 {
        let w = [r.uniform(), r.uniform()];
        let w2 = [w[0] + 0.01 * (r.uniform() - 0.5), w[1] + 0.01 * (r.uniform() - 0.5)];
        let t = r.uniform();
        let mid = [t * w[0] + (1.0 - t) * w2[0], t * w[1] + (1.0 - t) * w2[1]];
        let (a, b, m) = (
            map.extend_traced(&w).unwrap(),
            map.extend_traced(&w2).unwrap(),
            map.extend_traced(&mid).unwrap(),
        );
        let set = vertices(&a);
        if set.is_none() || set != vertices(&b) || set != vertices(&m) {
            continue;
        }
        checked += 1;
        for k in 0..2 {
            let want = t * a.point[k] + (1.0 - t) * b.point[k];
            assert!((m.point[k] - want).abs() < 1e-10);
        }
    }
    assert!(checked > 100, "{checked}");
}

#[test]
fn every_cell_keeps_its_share() {
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let n = 10;
    let codes = random_cloud(&mut rng, n, 2);
    let map = solved_map(codes, 0.3);
    let mut r = RngStream::new(6, 6);
    let total = 100_000;
    let mut hits = vec![0usize; n];
    for _ in 0..total {
        hits[map.extend_traced(&[r.uniform(), r.uniform()]).unwrap().cell] += 1;
    }
    let p = 1.0 / n as f64;
    let se = (p * (1.0 - p) / total as f64).sqrt();
    for h in hits {
        // solver tolerance 0.2/n plus sampling error
        assert!((h as f64 / total as f64 - p).abs() <= 0.2 * p + 4.0 * se, "{h}");
    }
}
